//! Ternary tree codes over a 287-symbol alphabet: seeded construction with
//! a verified (or honestly measured) distance parameter, online encoding,
//! and exact minimum-distance decoding.
//!
//! A label packs the last two source symbols (9 values) with a 31-valued
//! hash of the whole root path, offset by one, so labels lie in `1..=279`.
//! Two consequences the decoder relies on: the three children of a node
//! always carry distinct labels, and an all-zero 9-bit word is never a
//! codeword, so zeroed symbols are pure erasures.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::util::{absorb, derived_rng, hash_words};

pub const ALPHABET_SIZE: u16 = 287;
pub const SYMBOL_BITS: usize = 9;
/// Largest symbol value that is ever a codeword.
pub const MAX_CODEWORD: u16 = 279;
/// Depths up to this are verified over every divergent pair.
pub const EXHAUSTIVE_DEPTH: usize = 12;

const HASH_SPAN: u64 = 31;
const TREECODE_TAG: u64 = 0x7472_6565;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TreeCodeError {
    #[error("requested depth {depth} exceeds the configured maximum {max}")]
    DepthTooLarge { depth: usize, max: usize },
    #[error("string of length {len} is longer than the code depth {depth}")]
    Overlength { len: usize, depth: usize },
    #[error("no labeling reached distance {target} after {attempts} attempts (best measured {best})")]
    VerificationFailed { target: f64, attempts: usize, best: f64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Source {
    Zero,
    One,
    Backspace,
}

impl Source {
    pub const ALL: [Source; 3] = [Source::Zero, Source::One, Source::Backspace];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_bit(b: bool) -> Self {
        if b {
            Source::One
        } else {
            Source::Zero
        }
    }
}

/// Applies backspaces left to right (a backspace on an empty string is a no-op).
pub fn parse(s: &[Source]) -> Vec<bool> {
    let mut out = Vec::with_capacity(s.len());
    for &c in s {
        match c {
            Source::Zero => out.push(false),
            Source::One => out.push(true),
            Source::Backspace => {
                out.pop();
            }
        }
    }
    out
}

pub fn is_codeword(sym: u16) -> bool {
    (1..=MAX_CODEWORD).contains(&sym)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeCodeConfig {
    pub max_depth: usize,
    /// Divergent pairs sampled when the depth is too large for exhaustive checking.
    pub sampled_pairs: usize,
    /// Labelings tried before settling for the best one found.
    pub attempts: usize,
    pub target_alpha: f64,
    /// When false, failing to reach `target_alpha` is an error.
    pub accept_best: bool,
    /// Search nodes a single decode may visit.
    pub decode_node_budget: u64,
}

impl Default for TreeCodeConfig {
    fn default() -> Self {
        TreeCodeConfig {
            max_depth: 128,
            sampled_pairs: 100_000,
            attempts: 4,
            target_alpha: 0.5,
            accept_best: true,
            decode_node_budget: 20_000_000,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Verification {
    Exhaustive,
    Sampled { pairs: usize },
}

/// Serializable description; the labeling is regenerated from `seed`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TreeCodeManifest {
    pub seed: u64,
    pub depth: usize,
    pub alpha: f64,
    pub verification: Verification,
    pub target_met: bool,
}

#[derive(Clone, Debug)]
pub struct TreeCode {
    seed: u64,
    depth: usize,
    alpha: f64,
    verification: Verification,
    target_met: bool,
    node_budget: u64,
}

/// Online encoder state for one transmitted string.
#[derive(Clone, Copy, Debug)]
pub struct Encoder {
    state: u64,
    prev: Source,
    len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Decoded {
    pub path: Vec<Source>,
    pub distance: usize,
    pub nodes: u64,
    /// The node budget ran out; `path` is the best found, not necessarily optimal.
    pub exhausted: bool,
}

fn label_of(prev: Source, cur: Source, child_state: u64) -> u16 {
    let window = (3 * prev.index() + cur.index()) as u64;
    (window * HASH_SPAN + child_state % HASH_SPAN + 1) as u16
}

fn root_state(seed: u64) -> u64 {
    hash_words(&[seed, TREECODE_TAG])
}

fn child_state(state: u64, s: Source) -> u64 {
    absorb(state, s.index() as u64)
}

impl TreeCode {
    /// Builds with the default configuration.
    pub fn construct(depth: usize, seed: u64) -> Result<TreeCode, TreeCodeError> {
        Self::construct_with(depth, seed, &TreeCodeConfig::default())
    }

    pub fn construct_with(depth: usize, seed: u64, cfg: &TreeCodeConfig) -> Result<TreeCode, TreeCodeError> {
        if depth > cfg.max_depth {
            return Err(TreeCodeError::DepthTooLarge { depth, max: cfg.max_depth });
        }
        let verification = if depth <= EXHAUSTIVE_DEPTH {
            Verification::Exhaustive
        } else {
            Verification::Sampled { pairs: cfg.sampled_pairs }
        };
        let mut best: Option<(u64, f64)> = None;
        for attempt in 0..cfg.attempts.max(1) {
            let s = if attempt == 0 { seed } else { hash_words(&[seed, attempt as u64]) };
            let alpha = match verification {
                Verification::Exhaustive => exhaustive_alpha(s, depth),
                Verification::Sampled { pairs } => sampled_alpha(s, depth, pairs),
            };
            if best.is_none_or(|(_, a)| alpha > a) {
                best = Some((s, alpha));
            }
            if alpha >= cfg.target_alpha {
                break;
            }
        }
        let (s, alpha) = best.unwrap();
        let target_met = alpha >= cfg.target_alpha;
        if !target_met && !cfg.accept_best {
            return Err(TreeCodeError::VerificationFailed {
                target: cfg.target_alpha,
                attempts: cfg.attempts,
                best: alpha,
            });
        }
        Ok(TreeCode { seed: s, depth, alpha, verification, target_met, node_budget: cfg.decode_node_budget })
    }

    /// Process-wide cached construction.
    pub fn shared(depth: usize, seed: u64, cfg: &TreeCodeConfig) -> Result<Arc<TreeCode>, TreeCodeError> {
        type Key = (usize, u64, usize, usize, u64, bool, u64, usize);
        static CACHE: OnceLock<Mutex<HashMap<Key, Arc<TreeCode>>>> = OnceLock::new();
        let key = (
            depth,
            seed,
            cfg.sampled_pairs,
            cfg.attempts,
            cfg.target_alpha.to_bits(),
            cfg.accept_best,
            cfg.decode_node_budget,
            cfg.max_depth,
        );
        let cache = CACHE.get_or_init(Default::default);
        if let Some(c) = cache.lock().unwrap().get(&key) {
            return Ok(c.clone());
        }
        let code = Arc::new(Self::construct_with(depth, seed, cfg)?);
        cache.lock().unwrap().insert(key, code.clone());
        Ok(code)
    }

    pub fn depth(&self) -> usize {
        self.depth
    }

    /// Measured distance parameter of this labeling.
    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn target_met(&self) -> bool {
        self.target_met
    }

    pub fn manifest(&self) -> TreeCodeManifest {
        TreeCodeManifest {
            seed: self.seed,
            depth: self.depth,
            alpha: self.alpha,
            verification: self.verification,
            target_met: self.target_met,
        }
    }

    pub fn encoder(&self) -> Encoder {
        Encoder { state: root_state(self.seed), prev: Source::Zero, len: 0 }
    }

    /// Appends one source symbol and returns its code symbol.
    pub fn push(&self, enc: &mut Encoder, s: Source) -> Result<u16, TreeCodeError> {
        if enc.len >= self.depth {
            return Err(TreeCodeError::Overlength { len: enc.len + 1, depth: self.depth });
        }
        let state = child_state(enc.state, s);
        let label = label_of(enc.prev, s, state);
        *enc = Encoder { state, prev: s, len: enc.len + 1 };
        Ok(label)
    }

    /// Code symbol for the last position of `path`.
    pub fn encode(&self, path: &[Source]) -> Result<u16, TreeCodeError> {
        Ok(*self.encode_all(path)?.last().expect("encode needs a nonempty string"))
    }

    /// Code symbols for every position of `path`.
    pub fn encode_all(&self, path: &[Source]) -> Result<Vec<u16>, TreeCodeError> {
        let mut enc = self.encoder();
        path.iter().map(|&s| self.push(&mut enc, s)).collect()
    }

    pub fn decode(&self, received: &[u16]) -> Decoded {
        self.decode_with_hint(received, &[])
    }

    /// Minimum-Hamming-distance decoding, lexicographically least among
    /// minimizers (`0 < 1 < ⊠`). `hint` (typically the previous decode)
    /// seeds the initial upper bound.
    pub fn decode_with_hint(&self, received: &[u16], hint: &[Source]) -> Decoded {
        let len = received.len().min(self.depth);
        let received = &received[..len];
        let informative: Vec<bool> = received.iter().map(|&r| is_codeword(r)).collect();
        let mut tail_erasures = vec![0usize; len + 1];
        for t in (0..len).rev() {
            tail_erasures[t] = tail_erasures[t + 1] + usize::from(!informative[t]);
        }
        // The window part of an informative symbol names the previous source symbol.
        let needs_prev = |t: usize| -> Option<usize> {
            (t < len && informative[t]).then(|| ((received[t] - 1) as u64 / HASH_SPAN) as usize / 3)
        };

        // incumbent: follow the hint, then greedily match
        let mut incumbent = Vec::with_capacity(len);
        let mut ub = 0;
        let (mut state, mut prev) = (root_state(self.seed), Source::Zero);
        for t in 0..len {
            let choice = if t < hint.len() {
                hint[t]
            } else {
                *Source::ALL
                    .iter()
                    .find(|&&s| label_of(prev, s, child_state(state, s)) == received[t])
                    .unwrap_or(&Source::Zero)
            };
            state = child_state(state, choice);
            ub += usize::from(label_of(prev, choice, state) != received[t]);
            prev = choice;
            incumbent.push(choice);
        }
        if ub == 0 {
            return Decoded { path: incumbent, distance: 0, nodes: len as u64, exhausted: false };
        }

        struct Frame {
            state: u64,
            prev: Source,
            dist: usize,
            next: usize,
        }
        let mut stack = vec![Frame { state: root_state(self.seed), prev: Source::Zero, dist: 0, next: 0 }];
        let mut path: Vec<Source> = Vec::with_capacity(len);
        let mut best: Option<(usize, Vec<Source>)> = None;
        let mut nodes = 0u64;
        let mut exhausted = false;
        while !stack.is_empty() {
            let depth = stack.len() - 1;
            let top = stack.last_mut().unwrap();
            if depth == len || top.next == 3 {
                if depth == len && best.as_ref().is_none_or(|(d, _)| top.dist < *d) {
                    best = Some((top.dist, path.clone()));
                }
                stack.pop();
                path.pop();
                continue;
            }
            let s = Source::ALL[top.next];
            top.next += 1;
            let cstate = child_state(top.state, s);
            let dist = top.dist + usize::from(label_of(top.prev, s, cstate) != received[depth]);
            let lookahead = needs_prev(depth + 1).map_or(0, |p| usize::from(p != s.index()));
            let lb = dist + tail_erasures[depth + 1] + lookahead;
            let pruned = match &best {
                None => lb > ub,
                Some((d, _)) => lb >= *d,
            };
            if pruned {
                continue;
            }
            nodes += 1;
            if nodes > self.node_budget {
                exhausted = true;
                break;
            }
            path.push(s);
            stack.push(Frame { state: cstate, prev: s, dist, next: 0 });
        }
        let (distance, path) = best.unwrap_or((ub, incumbent));
        Decoded { path, distance, nodes, exhausted }
    }
}

/// All labels to `depth`, level by level; children of node `i` at one level
/// are `3i..3i+3` at the next.
fn label_table(seed: u64, depth: usize) -> Vec<Vec<u16>> {
    let mut labels = vec![Vec::new()];
    let mut states = vec![root_state(seed)];
    let mut prevs = vec![Source::Zero];
    for _ in 0..depth {
        let mut nl = Vec::with_capacity(states.len() * 3);
        let mut ns = Vec::with_capacity(states.len() * 3);
        let mut np = Vec::with_capacity(states.len() * 3);
        for (i, &st) in states.iter().enumerate() {
            for s in Source::ALL {
                let c = child_state(st, s);
                nl.push(label_of(prevs[i], s, c));
                ns.push(c);
                np.push(s);
            }
        }
        labels.push(nl);
        states = ns;
        prevs = np;
    }
    labels
}

struct PairSearch<'a> {
    labels: &'a [Vec<u16>],
    depth: usize,
    best: f64,
}

impl PairSearch<'_> {
    /// `x`, `y` at level `t`; `d` disagreements over `l` positions since divergence.
    fn walk(&mut self, t: usize, x: usize, y: usize, d: usize, l: usize, l_max: usize) {
        let ratio = d as f64 / l as f64;
        if ratio < self.best {
            self.best = ratio;
        }
        if t == self.depth || d as f64 >= self.best * l_max as f64 {
            return;
        }
        let next = &self.labels[t + 1];
        for a in 0..3 {
            for b in 0..3 {
                let (cx, cy) = (3 * x + a, 3 * y + b);
                let dd = d + usize::from(next[cx] != next[cy]);
                self.walk(t + 1, cx, cy, dd, l + 1, l_max);
            }
        }
    }
}

/// Exact `min d/ℓ` over every divergent pair and suffix length.
fn exhaustive_alpha(seed: u64, depth: usize) -> f64 {
    if depth == 0 {
        return 1.0;
    }
    let labels = label_table(seed, depth);
    let mut search = PairSearch { labels: &labels, depth, best: 1.0 };
    // deep divergences first: cheap, and they tighten the bound early
    for h in (1..=depth).rev() {
        let l_max = depth - h + 1;
        for parent in 0..labels[h - 1].len().max(1) {
            for a in 0..3 {
                for b in a + 1..3 {
                    let (x, y) = (3 * parent + a, 3 * parent + b);
                    let d = usize::from(labels[h][x] != labels[h][y]);
                    search.walk(h, x, y, d, 1, l_max);
                }
            }
        }
    }
    search.best
}

/// `min d/ℓ` over randomly sampled divergent pairs, with the second path
/// copying the first's continuation half the time to stress hash collisions.
fn sampled_alpha(seed: u64, depth: usize, pairs: usize) -> f64 {
    let mut rng = derived_rng(seed, &[TREECODE_TAG, depth as u64]);
    let mut best = 1.0f64;
    for _ in 0..pairs {
        let h = rng.gen_range(1..=depth);
        let (mut sx, mut px) = (root_state(seed), Source::Zero);
        for _ in 1..h {
            let s = Source::ALL[rng.gen_range(0..3)];
            sx = child_state(sx, s);
            px = s;
        }
        let (mut sy, mut py) = (sx, px);
        let a = rng.gen_range(0..3);
        let b = (a + rng.gen_range(1..3)) % 3;
        let mut d = 0;
        for l in 1..=depth - h + 1 {
            let (cx, cy) = if l == 1 {
                (Source::ALL[a], Source::ALL[b])
            } else {
                let cx = Source::ALL[rng.gen_range(0..3)];
                let cy = if rng.gen_bool(0.5) { cx } else { Source::ALL[rng.gen_range(0..3)] };
                (cx, cy)
            };
            let nx = child_state(sx, cx);
            let ny = child_state(sy, cy);
            d += usize::from(label_of(px, cx, nx) != label_of(py, cy, ny));
            sx = nx;
            sy = ny;
            px = cx;
            py = cy;
            best = best.min(d as f64 / l as f64);
        }
    }
    best
}

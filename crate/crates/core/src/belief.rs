//! Belief states: a dialogue history folded into a fixed-size vector through
//! the projection matrix `M`, with geometric discounting of older turns.
//!
//! `b_i = [o^h_{i-1}, o_i, a^h_{i-2}, a_{i-1}]` where `o_k = O_k M`,
//! `a_k = A_k M` and `x^h_n = Σ_{k<=n} ξ^{n-k} x_k`. Empty sums are zero.

use std::fs;
use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{BowVector, History, Vocabulary};
use crate::error::{Error, Result};

/// Projection from bag-of-words space (`v`) to the state space (`d`).
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix(pub Array2<f64>);

impl ProjectionMatrix {
    pub fn random<R: Rng + ?Sized>(vocab_len: usize, dim: usize, std: f64, rng: &mut R) -> Self {
        let normal = Normal::new(0.0, std).expect("finite std");
        ProjectionMatrix(Array2::from_shape_simple_fn((vocab_len, dim), || normal.sample(rng)))
    }

    pub fn vocab_len(&self) -> usize {
        self.0.nrows()
    }

    pub fn dim(&self) -> usize {
        self.0.ncols()
    }

    /// Replaces rows for tokens listed in a `token v_1 … v_d` text file.
    /// Tokens absent from the file keep their current rows. Returns the
    /// number of rows replaced.
    pub fn load_embeddings(&mut self, path: &Path, vocab: &Vocabulary) -> Result<usize> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dim = self.dim();
        let mut replaced = 0;
        for (i, line) in text.lines().enumerate() {
            let mut parts = line.split_whitespace();
            let Some(token) = parts.next() else { continue };
            let values: Vec<f64> = parts
                .map(|p| p.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: e.to_string(),
                })?;
            if values.len() != dim {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    message: format!("expected {dim} values, found {}", values.len()),
                });
            }
            if let Some(id) = vocab.id(token) {
                self.0.row_mut(id).assign(&ArrayView1::from(&values[..]));
                replaced += 1;
            }
        }
        Ok(replaced)
    }
}

/// Memory factor `ξ ∈ [0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MemoryFactor(f64);

impl MemoryFactor {
    pub fn new(xi: f64) -> Result<Self> {
        if (0.0..=1.0).contains(&xi) {
            Ok(MemoryFactor(xi))
        } else {
            Err(Error::Config(format!("memory factor must lie in [0, 1], got {xi}")))
        }
    }

    pub fn get(self) -> f64 {
        self.0
    }
}

impl Default for MemoryFactor {
    fn default() -> Self {
        MemoryFactor(0.8)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BeliefState {
    pub o_hist: Array1<f64>,
    pub o_cur: Array1<f64>,
    pub a_hist: Array1<f64>,
    pub a_last: Array1<f64>,
}

impl BeliefState {
    pub fn dim(&self) -> usize {
        self.o_cur.len()
    }

    /// The concatenation `[o_hist, o_cur, a_hist, a_last]` (length `4d`).
    pub fn vector(&self) -> Array1<f64> {
        let d = self.dim();
        let mut b = Array1::zeros(4 * d);
        for (k, part) in self.parts().into_iter().enumerate() {
            b.slice_mut(s![k * d..(k + 1) * d]).assign(part);
        }
        b
    }

    pub fn parts(&self) -> [&Array1<f64>; 4] {
        [&self.o_hist, &self.o_cur, &self.a_hist, &self.a_last]
    }

    pub fn is_finite(&self) -> bool {
        self.parts().iter().all(|p| p.iter().all(|x| x.is_finite()))
    }
}

/// `x · M`: sum of the rows of `M` selected by the set entries of `x`.
pub fn project(x: &BowVector, m: &ProjectionMatrix) -> Result<Array1<f64>> {
    if x.len() != m.vocab_len() {
        return Err(Error::Shape(format!(
            "bag of words has length {}, projection expects {}",
            x.len(),
            m.vocab_len()
        )));
    }
    let mut out = Array1::zeros(m.dim());
    for &k in x.active() {
        out += &m.0.row(k);
    }
    Ok(out)
}

/// Advances the belief by one user turn.
///
/// With `prev = None` this is the opening turn and `b_0 = [0, o_0, 0, 0]`.
/// Otherwise `prev_agent` is the reply `A_{i-1}` that preceded `new_user`.
pub fn belief_step(
    prev: Option<&BeliefState>,
    new_user: &BowVector,
    prev_agent: Option<&BowVector>,
    m: &ProjectionMatrix,
    xi: MemoryFactor,
) -> Result<BeliefState> {
    let d = m.dim();
    let o_cur = project(new_user, m)?;
    let a_last = match prev_agent {
        Some(a) => project(a, m)?,
        None => Array1::zeros(d),
    };
    let xi = xi.get();
    Ok(match prev {
        None => BeliefState {
            o_hist: Array1::zeros(d),
            o_cur,
            a_hist: Array1::zeros(d),
            a_last,
        },
        Some(p) => BeliefState {
            o_hist: &p.o_hist * xi + &p.o_cur,
            o_cur,
            a_hist: &p.a_hist * xi + &p.a_last,
            a_last,
        },
    })
}

/// Discount-weighted bags behind each belief block, in vocabulary space.
///
/// Block `k` of the belief equals `bags[k] · M`; gradients with respect to
/// `M` are outer products of these bags with the block gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBags(pub [Array1<f64>; 4]);

impl HistoryBags {
    pub fn new(h: &History, vocab_len: usize, xi: MemoryFactor) -> Self {
        let xi = xi.get();
        let i = h.index();
        let mut bags: [Array1<f64>; 4] = std::array::from_fn(|_| Array1::zeros(vocab_len));
        // o^h_{i-1} = Σ_{k<=i-1} ξ^{i-1-k} O_k
        for (k, utt) in h.user()[..i].iter().enumerate() {
            let w = xi.powi((i - 1 - k) as i32);
            for &t in utt.bow().active() {
                bags[0][t] += w;
            }
        }
        for &t in h.current().bow().active() {
            bags[1][t] = 1.0;
        }
        // a^h_{i-2} = Σ_{k<=i-2} ξ^{i-2-k} A_k
        if i >= 2 {
            for (k, utt) in h.agent()[..i - 1].iter().enumerate() {
                let w = xi.powi((i - 2 - k) as i32);
                for &t in utt.bow().active() {
                    bags[2][t] += w;
                }
            }
        }
        if i >= 1 {
            for &t in h.agent()[i - 1].bow().active() {
                bags[3][t] = 1.0;
            }
        }
        HistoryBags(bags)
    }

    pub fn belief(&self, m: &ProjectionMatrix) -> BeliefState {
        let [o_hist, o_cur, a_hist, a_last] = std::array::from_fn(|k| self.0[k].dot(&m.0));
        BeliefState {
            o_hist,
            o_cur,
            a_hist,
            a_last,
        }
    }
}

/// Evaluates the discounted sums directly for the whole history.
pub fn belief_from_history(h: &History, m: &ProjectionMatrix, xi: MemoryFactor) -> Result<BeliefState> {
    for utt in h.user().iter().chain(h.agent()) {
        if utt.bow().len() != m.vocab_len() {
            return Err(Error::Shape(format!(
                "history encoded over {} tokens, projection expects {}",
                utt.bow().len(),
                m.vocab_len()
            )));
        }
    }
    Ok(HistoryBags::new(h, m.vocab_len(), xi).belief(m))
}

/// Folds [`belief_step`] over the history, turn by turn.
pub fn belief_incremental(h: &History, m: &ProjectionMatrix, xi: MemoryFactor) -> Result<BeliefState> {
    let mut b = belief_step(None, h.user()[0].bow(), None, m, xi)?;
    for i in 1..=h.index() {
        b = belief_step(Some(&b), h.user()[i].bow(), Some(h.agent()[i - 1].bow()), m, xi)?;
    }
    Ok(b)
}

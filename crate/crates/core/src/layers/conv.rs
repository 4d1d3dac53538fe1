use super::params::{Forward, ParamId, ParamStore};
use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};
use crate::graph::{normalized_adjacency, DenseMatrix, SkeletonGraph};
use crate::rng::StreamRng;

/// Initial adjacency logit at self and neighbor positions; the negation is
/// used everywhere else.
pub const ADJACENCY_INIT_LOGIT: f64 = 2.0;

fn projection_bound(in_dim: usize) -> f64 {
    1.0 / (in_dim as f64).sqrt()
}

/// Chebyshev graph convolution: `sum_k T_k(L̃) X θ_k + b`.
///
/// The `K` weight matrices are stored as one `[K, in, out]` tensor so the
/// whole filter is a single matrix product against the concatenated basis.
#[derive(Debug, Clone)]
pub struct ChebGConv {
    order: usize,
    in_dim: usize,
    out_dim: usize,
    weight: ParamId,
    bias: Option<ParamId>,
}

impl ChebGConv {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        order: usize,
        bias: bool,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        if order == 0 {
            return Err(Error::Config("Chebyshev order must be at least 1".into()));
        }
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[order, in_dim, out_dim],
            projection_bound(in_dim),
            rng,
        );
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim])));
        Ok(Self {
            order,
            in_dim,
            out_dim,
            weight,
            bias,
        })
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> Option<ParamId> {
        self.bias
    }

    /// Chebyshev terms `[T_0(L̃)X, ..., T_{K-1}(L̃)X]` recorded on the tape.
    pub fn basis(&self, f: &mut Forward, rescaled: Var, x: Var) -> Result<Vec<Var>> {
        let j = f.tape.shape(rescaled)[0];
        let xs = f.tape.shape(x);
        if xs.len() < 2 || xs[xs.len() - 2] != j {
            return Err(Error::Shape {
                op: "chebgconv",
                lhs: f.tape.shape(rescaled).to_vec(),
                rhs: xs.to_vec(),
            });
        }
        let mut terms = vec![x];
        if self.order >= 2 {
            terms.push(f.tape.matmul(rescaled, x)?);
        }
        for k in 2..self.order {
            let lt = f.tape.matmul(rescaled, terms[k - 1])?;
            let twice = f.tape.scale(lt, 2.0);
            terms.push(f.tape.sub(twice, terms[k - 2])?);
        }
        Ok(terms)
    }

    pub fn forward(&self, f: &mut Forward, rescaled: Var, x: Var) -> Result<Var> {
        let d = *f.tape.shape(x).last().unwrap_or(&0);
        if d != self.in_dim {
            return Err(Error::Shape {
                op: "chebgconv",
                lhs: vec![self.in_dim, self.out_dim],
                rhs: f.tape.shape(x).to_vec(),
            });
        }
        let terms = self.basis(f, rescaled, x)?;
        let stacked = if terms.len() == 1 {
            terms[0]
        } else {
            f.tape.concat(&terms)?
        };
        let w = f.param(self.weight);
        let w = f
            .tape
            .reshape(w, &[self.order * self.in_dim, self.out_dim])?;
        let y = f.tape.matmul(stacked, w)?;
        match self.bias {
            Some(b) => {
                let b = f.param(b);
                f.tape.add(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Graph convolution with a learnable aggregation matrix:
/// `Â X Θ + b`, where `Â` is the row-normalized sigmoid of free logits.
#[derive(Debug, Clone)]
pub struct LamGConv {
    joints: usize,
    in_dim: usize,
    out_dim: usize,
    adjacency: ParamId,
    weight: ParamId,
    bias: ParamId,
}

impl LamGConv {
    /// Logits start at `+2` on the skeleton's self/neighbor pattern and `-2`
    /// elsewhere.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        skeleton: &SkeletonGraph,
        in_dim: usize,
        out_dim: usize,
        rng: &mut StreamRng,
    ) -> Self {
        let j = skeleton.joint_count();
        let pattern = normalized_adjacency(skeleton);
        let logits = pattern
            .data()
            .iter()
            .map(|&v| {
                if v != 0.0 {
                    ADJACENCY_INIT_LOGIT
                } else {
                    -ADJACENCY_INIT_LOGIT
                }
            })
            .collect();
        let adjacency = store.add(
            format!("{name}.adjacency"),
            Tensor::new(vec![j, j], logits).expect("j x j"),
        );
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[in_dim, out_dim],
            projection_bound(in_dim),
            rng,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]));
        Self {
            joints: j,
            in_dim,
            out_dim,
            adjacency,
            weight,
            bias,
        }
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn adjacency(&self) -> ParamId {
        self.adjacency
    }

    pub fn weight(&self) -> ParamId {
        self.weight
    }

    pub fn bias(&self) -> ParamId {
        self.bias
    }

    pub fn aggregation(&self, f: &mut Forward) -> Var {
        let logits = f.param(self.adjacency);
        let s = f.tape.sigmoid(logits);
        f.tape.row_normalize(s)
    }

    /// The effective aggregation matrix `Â` for the current parameters.
    pub fn effective_adjacency(&self, store: &ParamStore) -> DenseMatrix {
        let mut f = Forward::eval(store);
        let a = self.aggregation(&mut f);
        f.value(a).to_matrix().expect("square matrix")
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let xs = f.tape.shape(x).to_vec();
        if xs.len() < 2 || xs[xs.len() - 2] != self.joints || xs[xs.len() - 1] != self.in_dim {
            return Err(Error::Shape {
                op: "lam_gconv",
                lhs: vec![self.joints, self.in_dim],
                rhs: xs,
            });
        }
        let a = self.aggregation(f);
        let w = f.param(self.weight);
        let xw = f.tape.matmul(x, w)?;
        let y = f.tape.matmul(a, xw)?;
        let b = f.param(self.bias);
        f.tape.add(y, b)
    }
}

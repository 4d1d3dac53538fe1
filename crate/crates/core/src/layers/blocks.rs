use super::attention::{LayerNorm, MultiHeadSelfAttention};
use super::conv::{ChebGConv, LamGConv};
use super::params::{Forward, ParamStore};
use crate::autodiff::Var;
use crate::error::Result;
use crate::graph::SkeletonGraph;
use crate::rng::StreamRng;

/// Attention block with the transformer MLP replaced by a learnable-adjacency
/// graph convolution pair:
///
/// ```text
/// y = x + dropout(mhsa(ln1(x)))
/// z = y + dropout(gcn2(relu(gcn1(ln2(y)))))
/// ```
#[derive(Debug, Clone)]
pub struct GraAttention {
    pub ln1: LayerNorm,
    pub mhsa: MultiHeadSelfAttention,
    pub ln2: LayerNorm,
    pub gcn1: LamGConv,
    pub gcn2: LamGConv,
    dropout: f64,
}

impl GraAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        skeleton: &SkeletonGraph,
        dim: usize,
        hidden: usize,
        heads: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Ok(Self {
            ln1: LayerNorm::new(store, &format!("{name}.ln1"), dim),
            mhsa: MultiHeadSelfAttention::new(store, &format!("{name}.mhsa"), dim, heads, rng)?,
            ln2: LayerNorm::new(store, &format!("{name}.ln2"), dim),
            gcn1: LamGConv::new(store, &format!("{name}.gcn1"), skeleton, dim, hidden, rng),
            gcn2: LamGConv::new(store, &format!("{name}.gcn2"), skeleton, hidden, dim, rng),
            dropout,
        })
    }

    pub fn forward(&self, f: &mut Forward, x: Var) -> Result<Var> {
        let h = self.ln1.forward(f, x)?;
        let h = self.mhsa.forward(f, h)?;
        let h = f.dropout(h, self.dropout)?;
        let y = f.tape.add(x, h)?;

        let h = self.ln2.forward(f, y)?;
        let h = self.gcn1.forward(f, h)?;
        let h = f.tape.relu(h);
        let h = self.gcn2.forward(f, h)?;
        let h = f.dropout(h, self.dropout)?;
        f.tape.add(y, h)
    }
}

/// Pre-norm residual pair of Chebyshev convolutions:
/// `x + dropout(conv2(relu(conv1(ln(x)))))`.
#[derive(Debug, Clone)]
pub struct ChebGConvBlock {
    pub ln: LayerNorm,
    pub conv1: ChebGConv,
    pub conv2: ChebGConv,
    dropout: f64,
}

impl ChebGConvBlock {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        order: usize,
        dropout: f64,
        rng: &mut StreamRng,
    ) -> Result<Self> {
        Ok(Self {
            ln: LayerNorm::new(store, &format!("{name}.ln"), dim),
            conv1: ChebGConv::new(store, &format!("{name}.conv1"), dim, dim, order, true, rng)?,
            conv2: ChebGConv::new(store, &format!("{name}.conv2"), dim, dim, order, true, rng)?,
            dropout,
        })
    }

    /// The residual branch alone, before dropout.
    pub fn branch(&self, f: &mut Forward, rescaled: Var, x: Var) -> Result<Var> {
        let h = self.ln.forward(f, x)?;
        let h = self.conv1.forward(f, rescaled, h)?;
        let h = f.tape.relu(h);
        self.conv2.forward(f, rescaled, h)
    }

    pub fn forward(&self, f: &mut Forward, rescaled: Var, x: Var) -> Result<Var> {
        let h = self.branch(f, rescaled, x)?;
        let h = f.dropout(h, self.dropout)?;
        f.tape.add(x, h)
    }
}

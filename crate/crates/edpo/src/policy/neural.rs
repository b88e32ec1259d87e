use std::cell::Cell;
use std::collections::BTreeMap;

use rand::Rng;

use crate::numerics::{Graph, NodeId, Tensor};
use crate::{Error, Result};

use super::{validate_query, Policy, Vocab};

/// Tiny autoregressive network: prompt/token/position embeddings feed a
/// causal mean-pooled context through one tanh layer and a projection to
/// vocabulary logits. Kept well under 50k parameters so training stays fast
/// while the parameter count is still meaningful for overhead accounting.
#[derive(Debug, Clone)]
pub struct NeuralPolicy {
    num_prompts: usize,
    vocab: Vocab,
    max_len: usize,
    dim: usize,
    hidden: usize,
    params: BTreeMap<String, Tensor>,
    fwd_count: Cell<u64>,
}

impl NeuralPolicy {
    pub fn new<R: Rng>(
        num_prompts: usize,
        vocab: Vocab,
        max_len: usize,
        dim: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if num_prompts == 0 || max_len == 0 || dim == 0 || hidden == 0 {
            return Err(Error::InvalidArgument("all neural policy dims must be positive".into()));
        }
        let v = vocab.size();
        let std = 0.2;
        let mut params = BTreeMap::new();
        params.insert("tok_emb".into(), Tensor::randn(vec![v, dim], std, rng).with_grad());
        params.insert("prompt_emb".into(), Tensor::randn(vec![num_prompts, dim], std, rng).with_grad());
        params.insert("pos_emb".into(), Tensor::randn(vec![max_len, dim], std, rng).with_grad());
        params.insert("w1".into(), Tensor::randn(vec![hidden, dim], 1.0 / (dim as f64).sqrt(), rng).with_grad());
        params.insert("b1".into(), Tensor::zeros(vec![hidden]).with_grad());
        params.insert("w2".into(), Tensor::randn(vec![v, hidden], 1.0 / (hidden as f64).sqrt(), rng).with_grad());
        params.insert("b2".into(), Tensor::zeros(vec![v]).with_grad());
        let n: usize = params.values().map(|t| t.len()).sum();
        if n > 50_000 {
            return Err(Error::InvalidArgument(format!("parameter count {n} exceeds 50k budget")));
        }
        Ok(NeuralPolicy { num_prompts, vocab, max_len, dim, hidden, params, fwd_count: Cell::new(0) })
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(|t| t.len()).sum()
    }

    fn context(&self, prompt: usize, prefix: &[usize]) -> Vec<f64> {
        let d = self.dim;
        let p = &self.params;
        let mut ctx = p["prompt_emb"].data()[prompt * d..(prompt + 1) * d].to_vec();
        let pos = &p["pos_emb"].data()[prefix.len() * d..(prefix.len() + 1) * d];
        for (c, x) in ctx.iter_mut().zip(pos) {
            *c += x;
        }
        if !prefix.is_empty() {
            let scale = 1.0 / prefix.len() as f64;
            for &t in prefix {
                let e = &p["tok_emb"].data()[t * d..(t + 1) * d];
                for (c, x) in ctx.iter_mut().zip(e) {
                    *c += scale * x;
                }
            }
        }
        ctx
    }
}

impl Policy for NeuralPolicy {
    fn vocab_size(&self) -> usize {
        self.vocab.size()
    }

    fn num_prompts(&self) -> usize {
        self.num_prompts
    }

    fn max_len(&self) -> usize {
        self.max_len
    }

    fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    fn arch_descriptor(&self) -> String {
        format!(
            "neural prompts={} vocab={} len={} dim={} hidden={}",
            self.num_prompts,
            self.vocab.size(),
            self.max_len,
            self.dim,
            self.hidden
        )
    }

    fn logits(&self, prompt: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        validate_query(self, prompt, prefix)?;
        self.fwd_count.set(self.fwd_count.get() + 1);
        let p = &self.params;
        let (d, h, v) = (self.dim, self.hidden, self.vocab.size());
        let ctx = self.context(prompt, prefix);
        let w1 = p["w1"].data();
        let b1 = p["b1"].data();
        let hid: Vec<f64> = (0..h)
            .map(|r| {
                let dot: f64 = (0..d).map(|c| w1[r * d + c] * ctx[c]).sum();
                (dot + b1[r]).tanh()
            })
            .collect();
        let w2 = p["w2"].data();
        let b2 = p["b2"].data();
        Ok((0..v)
            .map(|r| {
                let dot: f64 = (0..h).map(|c| w2[r * h + c] * hid[c]).sum();
                dot + b2[r]
            })
            .collect())
    }

    fn logits_node(
        &self,
        graph: &mut Graph,
        bound: &BTreeMap<String, NodeId>,
        prompt: usize,
        prefix: &[usize],
    ) -> Result<NodeId> {
        validate_query(self, prompt, prefix)?;
        self.fwd_count.set(self.fwd_count.get() + 1);
        let get = |name: &str| -> Result<NodeId> {
            bound
                .get(name)
                .copied()
                .ok_or_else(|| Error::Internal(format!("parameter {name} not bound")))
        };
        let prompt_row = graph.row(get("prompt_emb")?, prompt)?;
        let pos_row = graph.row(get("pos_emb")?, prefix.len())?;
        let mut ctx = graph.add(prompt_row, pos_row)?;
        if !prefix.is_empty() {
            let tok_emb = get("tok_emb")?;
            let scale = 1.0 / prefix.len() as f64;
            for &t in prefix {
                let row = graph.row(tok_emb, t)?;
                let scaled = graph.scale(row, scale);
                ctx = graph.add(ctx, scaled)?;
            }
        }
        let pre = graph.matvec(get("w1")?, ctx)?;
        let pre = graph.add(pre, get("b1")?)?;
        let hid = graph.tanh(pre);
        let out = graph.matvec(get("w2")?, hid)?;
        graph.add(out, get("b2")?)
    }

    fn forward_count(&self) -> u64 {
        self.fwd_count.get()
    }

    fn reset_forward_count(&self) {
        self.fwd_count.set(0);
    }

    fn clone_policy(&self) -> Box<dyn Policy> {
        let mut c = self.clone();
        c.fwd_count = Cell::new(0);
        Box::new(c)
    }
}

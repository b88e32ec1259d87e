use std::cell::Cell;
use std::collections::BTreeMap;

use crate::numerics::{Graph, NodeId, Tensor};
use crate::{Error, Result};

use super::{validate_query, Policy, Vocab};

/// One logit row per reachable (prompt, prefix) pair, for all prefixes of
/// length < max_len. The table is itself the parameter vector, so the policy
/// is exactly as expressive as the enumerable task.
#[derive(Debug, Clone)]
pub struct TabularPolicy {
    num_prompts: usize,
    vocab: Vocab,
    max_len: usize,
    /// Row offset of the first prefix of each length.
    level_base: Vec<usize>,
    /// Rows per prompt.
    slots: usize,
    params: BTreeMap<String, Tensor>,
    fwd_count: Cell<u64>,
}

impl TabularPolicy {
    pub fn new(num_prompts: usize, vocab: Vocab, max_len: usize) -> Result<Self> {
        if num_prompts == 0 || max_len == 0 {
            return Err(Error::InvalidArgument("need at least one prompt and length 1".into()));
        }
        let v = vocab.size();
        let mut level_base = vec![0usize];
        for k in 1..max_len {
            level_base.push(level_base[k - 1] + v.pow((k - 1) as u32));
        }
        let slots = level_base[max_len - 1] + v.pow((max_len - 1) as u32);
        let table = Tensor::zeros(vec![num_prompts * slots, v]).with_grad();
        let mut params = BTreeMap::new();
        params.insert("table".to_string(), table);
        Ok(TabularPolicy {
            num_prompts,
            vocab,
            max_len,
            level_base,
            slots,
            params,
            fwd_count: Cell::new(0),
        })
    }

    fn row_index(&self, prompt: usize, prefix: &[usize]) -> usize {
        let v = self.vocab.size();
        let mut offset = 0usize;
        for &t in prefix {
            offset = offset * v + t;
        }
        prompt * self.slots + self.level_base[prefix.len()] + offset
    }

    /// Direct mutable access to one logit row, for constructing fixtures.
    pub fn set_row(&mut self, prompt: usize, prefix: &[usize], logits: &[f64]) -> Result<()> {
        validate_query(self, prompt, prefix)?;
        if logits.len() != self.vocab.size() {
            return Err(Error::InvalidArgument("logit row length mismatch".into()));
        }
        let row = self.row_index(prompt, prefix);
        let v = self.vocab.size();
        let table = self.params.get_mut("table").unwrap();
        table.data_mut()[row * v..(row + 1) * v].copy_from_slice(logits);
        Ok(())
    }
}

impl Policy for TabularPolicy {
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
            "tabular prompts={} vocab={} len={}",
            self.num_prompts,
            self.vocab.size(),
            self.max_len
        )
    }

    fn logits(&self, prompt: usize, prefix: &[usize]) -> Result<Vec<f64>> {
        validate_query(self, prompt, prefix)?;
        self.fwd_count.set(self.fwd_count.get() + 1);
        let row = self.row_index(prompt, prefix);
        let v = self.vocab.size();
        Ok(self.params["table"].data()[row * v..(row + 1) * v].to_vec())
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
        let table = *bound
            .get("table")
            .ok_or_else(|| Error::Internal("table parameter not bound".into()))?;
        graph.row(table, self.row_index(prompt, prefix))
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

use crate::error::{Error, Result};

/// Up to `block_size` consecutive cached positions of one KV head.
#[derive(Debug, Clone, PartialEq)]
pub struct KvBlock {
    start: usize,
    len: usize,
    keys: Vec<f32>,
    values: Vec<f32>,
}

impl KvBlock {
    /// Absolute position of the first entry.
    pub fn start(&self) -> usize {
        self.start
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn positions(&self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }

    pub fn key(&self, slot: usize, head_dim: usize) -> &[f32] {
        &self.keys[slot * head_dim..(slot + 1) * head_dim]
    }

    pub fn value(&self, slot: usize, head_dim: usize) -> &[f32] {
        &self.values[slot * head_dim..(slot + 1) * head_dim]
    }
}

/// Per-layer, per-KV-head blocked key/value store. Keys are stored after
/// rotary encoding. Block `b` covers positions `[b*B, (b+1)*B)`.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCache {
    block_size: usize,
    head_dim: usize,
    num_kv_heads: usize,
    /// `[layer][head] -> blocks`
    layers: Vec<Vec<Vec<KvBlock>>>,
    lens: Vec<usize>,
}

impl KvCache {
    pub fn new(num_layers: usize, num_kv_heads: usize, head_dim: usize, block_size: usize) -> Self {
        Self {
            block_size,
            head_dim,
            num_kv_heads,
            layers: vec![vec![Vec::new(); num_kv_heads]; num_layers],
            lens: vec![0; num_layers],
        }
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn head_dim(&self) -> usize {
        self.head_dim
    }

    pub fn num_kv_heads(&self) -> usize {
        self.num_kv_heads
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    /// Committed sequence length. Every layer agrees outside a forward pass.
    pub fn seq_len(&self) -> usize {
        self.lens.first().copied().unwrap_or(0)
    }

    pub fn layer_len(&self, layer: usize) -> usize {
        self.lens[layer]
    }

    pub fn is_empty(&self) -> bool {
        self.seq_len() == 0
    }

    pub fn block_of(&self, position: usize) -> usize {
        position / self.block_size
    }

    /// Blocks per head at `layer`.
    pub fn num_blocks(&self, layer: usize) -> usize {
        self.lens[layer].div_ceil(self.block_size)
    }

    pub fn blocks(&self, layer: usize, head: usize) -> &[KvBlock] {
        &self.layers[layer][head]
    }

    pub fn key(&self, layer: usize, head: usize, position: usize) -> &[f32] {
        let block = &self.layers[layer][head][position / self.block_size];
        block.key(position % self.block_size, self.head_dim)
    }

    pub fn value(&self, layer: usize, head: usize, position: usize) -> &[f32] {
        let block = &self.layers[layer][head][position / self.block_size];
        block.value(position % self.block_size, self.head_dim)
    }

    /// Appends one position at `layer`; `keys` and `values` hold all KV
    /// heads back to back.
    pub fn push(&mut self, layer: usize, keys: &[f32], values: &[f32]) {
        let hd = self.head_dim;
        debug_assert_eq!(keys.len(), hd * self.num_kv_heads);
        let pos = self.lens[layer];
        for (h, blocks) in self.layers[layer].iter_mut().enumerate() {
            if pos % self.block_size == 0 {
                blocks.push(KvBlock {
                    start: pos,
                    len: 0,
                    keys: Vec::with_capacity(self.block_size * hd),
                    values: Vec::with_capacity(self.block_size * hd),
                });
            }
            let block = blocks.last_mut().expect("block exists");
            block.keys.extend_from_slice(&keys[h * hd..(h + 1) * hd]);
            block.values.extend_from_slice(&values[h * hd..(h + 1) * hd]);
            block.len += 1;
        }
        self.lens[layer] += 1;
    }

    /// Drops every position `>= len` in all layers.
    pub fn truncate(&mut self, len: usize) {
        let hd = self.head_dim;
        for (layer, heads) in self.layers.iter_mut().enumerate() {
            if self.lens[layer] <= len {
                continue;
            }
            for blocks in heads.iter_mut() {
                let keep_blocks = len.div_ceil(self.block_size);
                blocks.truncate(keep_blocks);
                if let Some(last) = blocks.last_mut() {
                    let keep = len - last.start;
                    last.len = keep;
                    last.keys.truncate(keep * hd);
                    last.values.truncate(keep * hd);
                }
            }
            self.lens[layer] = len;
        }
    }

    pub fn check_consistent(&self) -> Result<()> {
        let l0 = self.seq_len();
        if self.lens.iter().any(|&l| l != l0) {
            return Err(Error::logic(format!(
                "layers disagree on sequence length: {:?}",
                self.lens
            )));
        }
        for heads in &self.layers {
            for blocks in heads {
                for (b, block) in blocks.iter().enumerate() {
                    let partial_ok = b + 1 == blocks.len() || block.len == self.block_size;
                    if block.start != b * self.block_size || !partial_ok || block.len == 0 {
                        return Err(Error::logic(format!("block {b} breaks the position partition")));
                    }
                }
            }
        }
        Ok(())
    }
}

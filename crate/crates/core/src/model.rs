//! The cross-modal network.
//!
//! A tiny shared CNN turns each frame into a grid of feature vectors; a
//! temporal fusion step collapses the frames of one clip into a single grid;
//! row/column position embeddings attach 2-d locations; the flattened grid
//! joins the embedded text behind `[CLS]`/`[SEP]` markers with per-side type
//! embeddings; a pre-norm transformer fuses the two, and small MLP heads read
//! the final `[CLS]` state. The whole thing is one pure function of
//! (parameters, one clip, one text), so clips are encoded independently.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::graph::{Graph, Var};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::{Error, Result};

/// Special token ids at the head of every vocabulary.
pub mod tokens {
    pub const PAD: u16 = 0;
    pub const CLS: u16 = 1;
    pub const SEP: u16 = 2;
    pub const MASK: u16 = 3;
    /// First id available for real words.
    pub const FIRST_WORD: u16 = 4;
}

/// Additive attention mask value for padded keys. exp(-1e30 - max) underflows
/// to exactly zero, so padded positions contribute nothing.
const MASK_NEG: f64 = -1e30;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TemporalFusion {
    Mean,
    Conv3d,
    Conv2p1d,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadKind {
    /// Two-way matched / not-matched scores for text-video retrieval.
    Retrieval,
    /// Two-way matched / not-matched scores used during pretraining.
    Itm,
    /// One score per answer candidate.
    Qa,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Square frame side L; inputs are zero-padded/resized to L x L.
    pub frame_size: usize,
    /// Output channels of the stride-2 CNN stages.
    pub cnn_channels: Vec<usize>,
    /// Token width d.
    pub hidden_dim: usize,
    /// Transformer depth.
    pub layers: usize,
    /// Attention heads.
    pub heads: usize,
    pub vocab_size: usize,
    /// Maximum caption words, not counting [CLS]/[SEP].
    pub max_text_len: usize,
    /// Answer candidates for the QA head.
    pub num_answers: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            frame_size: 32,
            cnn_channels: vec![24, 48],
            hidden_dim: 64,
            layers: 2,
            heads: 4,
            vocab_size: 64,
            max_text_len: 12,
            num_answers: 12,
        }
    }
}

impl ModelConfig {
    /// Grid side after the stride-2 stages and the final 2x2 pool.
    pub fn grid_side(&self) -> usize {
        self.frame_size >> (self.cnn_channels.len() + 1)
    }

    /// Visual tokens per clip.
    pub fn clip_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    /// Longest assembled sequence: [CLS] + text + [SEP] + clip tokens.
    pub fn max_seq_len(&self) -> usize {
        2 + self.max_text_len + self.clip_tokens()
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("need at least one transformer layer".into()));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.cnn_channels.is_empty() {
            return Err(Error::Config("need at least one CNN stage".into()));
        }
        let down = 1usize << (self.cnn_channels.len() + 1);
        if self.frame_size % down != 0 || self.grid_side() == 0 {
            return Err(Error::Config(format!(
                "frame size {} does not survive {} halvings",
                self.frame_size,
                self.cnn_channels.len() + 1
            )));
        }
        if self.vocab_size <= tokens::FIRST_WORD as usize {
            return Err(Error::Config("vocabulary smaller than the special tokens".into()));
        }
        if self.num_answers < 2 {
            return Err(Error::Config("QA head needs at least two candidates".into()));
        }
        Ok(())
    }
}

/// Which encoder parameter groups stay fixed during training. Frozen groups
/// are bound as constants, so no gradient reaches or passes them.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FreezeFlags {
    /// Vision encoder (all CNN stages and the depth-reduction conv).
    pub vision: bool,
    /// Language encoder (the word embedding table).
    pub text: bool,
}

impl FreezeFlags {
    pub fn none() -> Self {
        FreezeFlags { vision: false, text: false }
    }

    pub fn both() -> Self {
        FreezeFlags { vision: true, text: true }
    }

    fn is_frozen(&self, name: &str) -> bool {
        (self.vision && name.starts_with("vision.")) || (self.text && name == "text.word_emb")
    }
}

/// Named parameter store.
#[derive(Debug, Clone, PartialEq)]
pub struct Params<S> {
    entries: BTreeMap<String, Tensor<S>>,
}

impl<S: Scalar> Params<S> {
    /// Fresh random initialization for a configuration. He-style scaling for
    /// conv kernels, 0.02-std normals for embeddings and linear maps.
    pub fn init(config: &ModelConfig, fusion: TemporalFusion, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.hidden_dim;
        let grid = config.grid_side();
        let mut entries = BTreeMap::new();

        fn conv<S: Scalar>(
            entries: &mut BTreeMap<String, Tensor<S>>,
            rng: &mut Rng,
            name: &str,
            shape: Vec<usize>,
        ) {
            let fan_in: usize = shape[1..].iter().product();
            let std = (2.0 / fan_in as f64).sqrt();
            let out_ch = shape[0];
            let data: Vec<S> = (0..shape.iter().product())
                .map(|_| S::of_f64(rng.normal() * std))
                .collect();
            entries.insert(format!("{name}.weight"), Tensor::new(shape, data).unwrap());
            entries.insert(format!("{name}.bias"), Tensor::zeros(vec![out_ch]));
        }
        fn dense<S: Scalar>(
            entries: &mut BTreeMap<String, Tensor<S>>,
            rng: &mut Rng,
            name: &str,
            rows: usize,
            cols: usize,
        ) {
            // Xavier scale; training starts from random weights here, so the
            // usual BERT 0.02 leaves attention too flat to pick up gradient
            let std = (2.0 / (rows + cols) as f64).sqrt();
            let data: Vec<S> = (0..rows * cols)
                .map(|_| S::of_f64(rng.normal() * std))
                .collect();
            entries.insert(format!("{name}.weight"), Tensor::new(vec![rows, cols], data).unwrap());
            entries.insert(format!("{name}.bias"), Tensor::zeros(vec![cols]));
        }
        fn table<S: Scalar>(
            entries: &mut BTreeMap<String, Tensor<S>>,
            rng: &mut Rng,
            name: &str,
            rows: usize,
            cols: usize,
        ) {
            let data: Vec<S> = (0..rows * cols)
                .map(|_| S::of_f64(rng.normal() * 0.02))
                .collect();
            entries.insert(name.to_string(), Tensor::new(vec![rows, cols], data).unwrap());
        }

        let mut in_ch = 3;
        for (i, &out_ch) in config.cnn_channels.iter().enumerate() {
            conv(&mut entries, rng, &format!("vision.stage{i}"), vec![out_ch, in_ch, 3, 3]);
            in_ch = out_ch;
        }
        conv(&mut entries, rng, "vision.reduce", vec![d, in_ch, 1, 1]);

        match fusion {
            TemporalFusion::Mean => {}
            TemporalFusion::Conv3d => {
                conv(&mut entries, rng, "fusion.conv", vec![d, d, 3, 3, 3]);
            }
            TemporalFusion::Conv2p1d => {
                conv(&mut entries, rng, "fusion.spatial", vec![d, d, 1, 3, 3]);
                conv(&mut entries, rng, "fusion.temporal", vec![d, d, 3, 1, 1]);
            }
        }

        table(&mut entries, rng, "pos.row", grid, d);
        table(&mut entries, rng, "pos.col", grid, d);
        table(&mut entries, rng, "text.word_emb", config.vocab_size, d);
        table(&mut entries, rng, "text.pos_emb", config.max_text_len + 2, d);
        table(&mut entries, rng, "type_emb", 2, d);

        for l in 0..config.layers {
            let p = format!("xmodal.layer{l}");
            entries.insert(format!("{p}.ln1.gamma"), Tensor::full(vec![d], S::one()));
            entries.insert(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]));
            for w in ["wq", "wk", "wv", "wo"] {
                dense(&mut entries, rng, &format!("{p}.attn.{w}"), d, d);
            }
            entries.insert(format!("{p}.ln2.gamma"), Tensor::full(vec![d], S::one()));
            entries.insert(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]));
            dense(&mut entries, rng, &format!("{p}.mlp.fc1"), d, 4 * d);
            dense(&mut entries, rng, &format!("{p}.mlp.fc2"), 4 * d, d);
        }
        entries.insert("xmodal.final_ln.gamma".into(), Tensor::full(vec![d], S::one()));
        entries.insert("xmodal.final_ln.beta".into(), Tensor::zeros(vec![d]));

        dense(&mut entries, rng, "head.retrieval.fc1", d, d);
        dense(&mut entries, rng, "head.retrieval.fc2", d, 2);
        dense(&mut entries, rng, "head.itm.fc1", d, d);
        dense(&mut entries, rng, "head.itm.fc2", d, 2);
        dense(&mut entries, rng, "head.qa.fc1", d, d);
        dense(&mut entries, rng, "head.qa.fc2", d, config.num_answers);
        dense(&mut entries, rng, "head.mlm.proj", d, config.vocab_size);

        Ok(Params { entries })
    }

    pub fn entries(&self) -> &BTreeMap<String, Tensor<S>> {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut BTreeMap<String, Tensor<S>> {
        &mut self.entries
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<S>> {
        self.entries.get(name)
    }

    /// Total parameter bytes at the in-memory scalar width.
    pub fn byte_size(&self) -> usize {
        self.entries.values().map(|t| t.numel() * std::mem::size_of::<S>()).sum()
    }

    pub fn arch_hash(&self) -> u64 {
        checkpoint::arch_hash(&self.entries)
    }

    pub fn save<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        checkpoint::save(path, &self.entries)
    }

    /// Loads a checkpoint into this parameter set. Shapes must match name by
    /// name; names absent from the file keep their current values and are
    /// returned, so callers can decide whether partial initialization is
    /// acceptable.
    pub fn load_from<P: AsRef<Path>>(&mut self, path: P) -> Result<Vec<String>> {
        let loaded = checkpoint::load::<S, _>(path)?;
        for (name, tensor) in &loaded {
            match self.entries.get_mut(name) {
                Some(slot) => {
                    if slot.shape() != tensor.shape() {
                        return Err(Error::Config(format!(
                            "checkpoint `{name}` has shape {:?}, model expects {:?}",
                            tensor.shape(),
                            slot.shape()
                        )));
                    }
                    *slot = tensor.clone();
                }
                None => {
                    return Err(Error::Config(format!(
                        "checkpoint contains `{name}` which this architecture does not define"
                    )))
                }
            }
        }
        Ok(self
            .entries
            .keys()
            .filter(|k| !loaded.contains_key(*k))
            .cloned()
            .collect())
    }
}

/// Parameters bound into one graph as leaves; all forward passes of a step
/// run against these handles.
pub struct BoundModel {
    pub config: ModelConfig,
    pub fusion: TemporalFusion,
    vars: BTreeMap<String, Var>,
}

impl BoundModel {
    /// Binds every parameter. `freeze` controls which encoder groups become
    /// constants; with `trainable` false everything is constant (inference).
    pub fn bind<S: Scalar>(
        g: &mut Graph<S>,
        params: &Params<S>,
        config: &ModelConfig,
        fusion: TemporalFusion,
        freeze: FreezeFlags,
        trainable: bool,
    ) -> Self {
        let vars = params
            .entries
            .iter()
            .map(|(name, tensor)| {
                let requires = trainable && !freeze.is_frozen(name);
                (name.clone(), g.leaf(tensor.clone(), requires))
            })
            .collect();
        BoundModel {
            config: config.clone(),
            fusion,
            vars,
        }
    }

    fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("model parameter `{name}` not bound"))
    }

    /// Gradients gathered per parameter name after a backward pass.
    pub fn collect_grads<S: Scalar>(&self, g: &Graph<S>) -> BTreeMap<String, Vec<S>> {
        self.vars
            .iter()
            .filter_map(|(name, &v)| g.grad(v).map(|gr| (name.clone(), gr.to_vec())))
            .collect()
    }

    /// One frame (raw `[3, L, L]` u8 plane) through the shared CNN:
    /// scale to [0,1], normalize with fixed 0.5 mean/std, stride-2 conv+relu
    /// stages, 1x1 depth reduction, 2x2 max-pool. Output `[d, G, G]`.
    pub fn encode_frame<S: Scalar>(&self, g: &mut Graph<S>, frame: &[u8]) -> Result<Var> {
        let l = self.config.frame_size;
        if frame.len() != 3 * l * l {
            return Err(Error::Dim(format!(
                "frame has {} bytes, expected 3x{l}x{l}",
                frame.len()
            )));
        }
        let data: Vec<S> = frame
            .iter()
            .map(|&b| S::of_f64((b as f64 / 255.0 - 0.5) / 0.5))
            .collect();
        let mut x = g.constant(Tensor::new(vec![3, l, l], data)?);
        for i in 0..self.config.cnn_channels.len() {
            let w = self.var(&format!("vision.stage{i}.weight"));
            let b = self.var(&format!("vision.stage{i}.bias"));
            x = g.conv2d(x, w, 2, 1)?;
            x = self.add_channel_bias(g, x, b)?;
            x = g.relu(x)?;
        }
        let w = self.var("vision.reduce.weight");
        let b = self.var("vision.reduce.bias");
        x = g.conv2d(x, w, 1, 0)?;
        x = self.add_channel_bias(g, x, b)?;
        x = g.relu(x)?;
        g.max_pool2(x)
    }

    fn add_channel_bias<S: Scalar>(&self, g: &mut Graph<S>, x: Var, bias: Var) -> Result<Var> {
        let c = g.shape(bias)[0];
        let rank = g.shape(x).len();
        let mut shape = vec![1; rank];
        shape[0] = c;
        let b = g.reshape(bias, shape)?;
        g.add(x, b)
    }

    /// All frames of a clip, shared weights.
    pub fn encode_frames<S: Scalar>(&self, g: &mut Graph<S>, frames: &[Vec<u8>]) -> Result<Vec<Var>> {
        if frames.is_empty() {
            return Err(Error::Input("clip with zero frames".into()));
        }
        frames.iter().map(|f| self.encode_frame(g, f)).collect()
    }

    /// Collapses the per-frame grids of one clip into a single grid.
    pub fn temporal_fuse<S: Scalar>(&self, g: &mut Graph<S>, maps: &[Var]) -> Result<Var> {
        if maps.is_empty() {
            return Err(Error::Input("fusing zero maps".into()));
        }
        match self.fusion {
            TemporalFusion::Mean => {
                if maps.len() == 1 {
                    return Ok(maps[0]);
                }
                let mut acc = maps[0];
                for &m in &maps[1..] {
                    acc = g.add(acc, m)?;
                }
                g.scale(acc, 1.0 / maps.len() as f64)
            }
            TemporalFusion::Conv3d => {
                let x = self.stack_time(g, maps)?;
                let w = self.var("fusion.conv.weight");
                let b = self.var("fusion.conv.bias");
                let y = g.conv3d(x, w, [1, 1, 1])?;
                let y = self.add_channel_bias(g, y, b)?;
                g.mean_axis(y, 1)
            }
            TemporalFusion::Conv2p1d => {
                let x = self.stack_time(g, maps)?;
                let ws = self.var("fusion.spatial.weight");
                let bs = self.var("fusion.spatial.bias");
                let y = g.conv3d(x, ws, [0, 1, 1])?;
                let y = self.add_channel_bias(g, y, bs)?;
                let wt = self.var("fusion.temporal.weight");
                let bt = self.var("fusion.temporal.bias");
                let y2 = g.conv3d(y, wt, [1, 0, 0])?;
                let y2 = self.add_channel_bias(g, y2, bt)?;
                g.mean_axis(y2, 1)
            }
        }
    }

    fn stack_time<S: Scalar>(&self, g: &mut Graph<S>, maps: &[Var]) -> Result<Var> {
        let s = g.shape(maps[0]).to_vec(); // [d, G, G]
        let framed: Vec<Var> = maps
            .iter()
            .map(|&m| g.reshape(m, vec![s[0], 1, s[1], s[2]]))
            .collect::<Result<_>>()?;
        g.concat(&framed, 1)
    }

    /// Adds the row/column position embeddings and flattens row-major:
    /// cell (r, c) becomes token r * G + c. Output `[G*G, d]`.
    pub fn add_grid_positions<S: Scalar>(&self, g: &mut Graph<S>, fused: Var) -> Result<Var> {
        let s = g.shape(fused).to_vec();
        let (d, gr, gc) = (s[0], s[1], s[2]);
        let grid = self.config.grid_side();
        if gr != grid || gc != grid || d != self.config.hidden_dim {
            return Err(Error::Config(format!(
                "fused map {s:?} does not match configured {}x{}x{}",
                self.config.hidden_dim, grid, grid
            )));
        }
        let flat = g.reshape(fused, vec![d, gr * gc])?;
        let feats = g.transpose(flat)?; // [G*G, d]
        let row_ids: Vec<usize> = (0..gr * gc).map(|i| i / gc).collect();
        let col_ids: Vec<usize> = (0..gr * gc).map(|i| i % gc).collect();
        let row_table = self.var("pos.row");
        let col_table = self.var("pos.col");
        let rows = g.gather_rows(row_table, &row_ids)?;
        let cols = g.gather_rows(col_table, &col_ids)?;
        let with_rows = g.add(feats, rows)?;
        g.add(with_rows, cols)
    }

    /// Keeps `k` distinct visual tokens drawn uniformly without replacement
    /// (position information survives because the embeddings are already
    /// attached). Pretraining only.
    pub fn pixel_random_sample<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        clip_tokens_var: Var,
        k: usize,
        rng: &mut Rng,
    ) -> Result<Var> {
        let n = g.shape(clip_tokens_var)[0];
        if k == 0 || k > n {
            return Err(Error::Input(format!("pixel sample of {k} from {n} cells")));
        }
        let mut picked = rng.choose_distinct(n, k);
        picked.sort_unstable();
        g.gather_rows(clip_tokens_var, &picked)
    }

    /// Word + text-position embeddings for an already assembled text-side
    /// sequence (`[CLS] caption [SEP]`, possibly with trailing `[PAD]`).
    pub fn encode_text<S: Scalar>(&self, g: &mut Graph<S>, ids: &[u16]) -> Result<Var> {
        if ids.len() > self.config.max_text_len + 2 {
            return Err(Error::Input(format!(
                "text of {} tokens exceeds maximum {}",
                ids.len(),
                self.config.max_text_len + 2
            )));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id as usize >= self.config.vocab_size) {
            return Err(Error::Input(format!(
                "token id {bad} out of vocabulary {}",
                self.config.vocab_size
            )));
        }
        let word_rows: Vec<usize> = ids.iter().map(|&i| i as usize).collect();
        let pos_rows: Vec<usize> = (0..ids.len()).collect();
        let words = self.var("text.word_emb");
        let positions = self.var("text.pos_emb");
        let w = g.gather_rows(words, &word_rows)?;
        let p = g.gather_rows(positions, &pos_rows)?;
        g.add(w, p)
    }

    /// Multi-head self-attention over `[Ls, d]` with an additive key mask
    /// `[1, Ls]`. Returns the mixed output (before the residual) and the
    /// per-head attention rows for inspection.
    pub fn attention<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        x: Var,
        layer: usize,
        key_mask: Var,
    ) -> Result<(Var, Vec<Var>)> {
        let d = self.config.hidden_dim;
        let heads = self.config.heads;
        let dh = d / heads;
        let p = format!("xmodal.layer{layer}.attn");
        let proj = |g: &mut Graph<S>, which: &str| -> Result<Var> {
            let w = self.var(&format!("{p}.{which}.weight"));
            let b = self.var(&format!("{p}.{which}.bias"));
            let y = g.matmul(x, w)?;
            g.add(y, b)
        };
        let q = proj(g, "wq")?;
        let k = proj(g, "wk")?;
        let v = proj(g, "wv")?;
        let mut contexts = Vec::with_capacity(heads);
        let mut attentions = Vec::with_capacity(heads);
        for h in 0..heads {
            let qh = g.slice_cols(q, h * dh, dh)?;
            let kh = g.slice_cols(k, h * dh, dh)?;
            let vh = g.slice_cols(v, h * dh, dh)?;
            let kt = g.transpose(kh)?;
            let scores = g.matmul(qh, kt)?;
            let scaled = g.scale(scores, 1.0 / (dh as f64).sqrt())?;
            let masked = g.add(scaled, key_mask)?;
            let attn = g.softmax(masked, 1)?;
            attentions.push(attn);
            contexts.push(g.matmul(attn, vh)?);
        }
        let ctx = g.concat(&contexts, 1)?;
        let wo = self.var(&format!("{p}.wo.weight"));
        let bo = self.var(&format!("{p}.wo.bias"));
        let mixed = g.matmul(ctx, wo)?;
        let out = g.add(mixed, bo)?;
        Ok((out, attentions))
    }

    /// Full cross-modal pass for one clip and one text. `text_ids` is the
    /// text side including specials and padding; `text_real[i]` marks
    /// non-padding positions. Returns the final hidden states `[Ls, d]`.
    pub fn cross_modal<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        clip_tokens_var: Var,
        text_ids: &[u16],
        text_real: &[bool],
    ) -> Result<Var> {
        if text_ids.len() != text_real.len() {
            return Err(Error::Input("text mask length differs from ids".into()));
        }
        let n_clip = g.shape(clip_tokens_var)[0];
        let seq_len = text_ids.len() + n_clip;
        if seq_len > self.config.max_seq_len() {
            return Err(Error::Input(format!(
                "sequence of {seq_len} exceeds maximum {}",
                self.config.max_seq_len()
            )));
        }

        let text = self.encode_text(g, text_ids)?;
        let type_table = self.var("type_emb");
        let text_type = g.gather_rows(type_table, &vec![0; text_ids.len()])?;
        let text_side = g.add(text, text_type)?;
        let clip_type = g.gather_rows(type_table, &vec![1; n_clip])?;
        let clip_side = g.add(clip_tokens_var, clip_type)?;
        let mut x = g.concat(&[text_side, clip_side], 0)?; // [Ls, d]

        let mask_values: Vec<f64> = text_real
            .iter()
            .map(|&real| if real { 0.0 } else { MASK_NEG })
            .chain(std::iter::repeat(0.0).take(n_clip))
            .collect();
        let key_mask = g.constant(Tensor::from_f64s(vec![1, seq_len], &mask_values)?);

        for layer in 0..self.config.layers {
            let p = format!("xmodal.layer{layer}");
            let g1 = self.var(&format!("{p}.ln1.gamma"));
            let b1 = self.var(&format!("{p}.ln1.beta"));
            let normed = g.layer_norm(x, g1, b1, 1e-5)?;
            let (attn_out, _) = self.attention(g, normed, layer, key_mask)?;
            x = g.add(x, attn_out)?;

            let g2 = self.var(&format!("{p}.ln2.gamma"));
            let b2 = self.var(&format!("{p}.ln2.beta"));
            let normed2 = g.layer_norm(x, g2, b2, 1e-5)?;
            let w1 = self.var(&format!("{p}.mlp.fc1.weight"));
            let bb1 = self.var(&format!("{p}.mlp.fc1.bias"));
            let w2 = self.var(&format!("{p}.mlp.fc2.weight"));
            let bb2 = self.var(&format!("{p}.mlp.fc2.bias"));
            let h = g.matmul(normed2, w1)?;
            let h = g.add(h, bb1)?;
            let h = g.gelu(h)?;
            let h = g.matmul(h, w2)?;
            let h = g.add(h, bb2)?;
            x = g.add(x, h)?;
        }
        let gf = self.var("xmodal.final_ln.gamma");
        let bf = self.var("xmodal.final_ln.beta");
        g.layer_norm(x, gf, bf, 1e-5)
    }

    /// Task head over the final `[CLS]` state: two-layer MLP with tanh.
    /// Output is a flat `[K]` logit vector.
    pub fn head_logits<S: Scalar>(&self, g: &mut Graph<S>, hidden: Var, head: HeadKind) -> Result<Var> {
        let name = match head {
            HeadKind::Retrieval => "head.retrieval",
            HeadKind::Itm => "head.itm",
            HeadKind::Qa => "head.qa",
        };
        let cls = g.gather_rows(hidden, &[0])?; // [1, d]
        let w1 = self.var(&format!("{name}.fc1.weight"));
        let b1 = self.var(&format!("{name}.fc1.bias"));
        let w2 = self.var(&format!("{name}.fc2.weight"));
        let b2 = self.var(&format!("{name}.fc2.bias"));
        let h = g.matmul(cls, w1)?;
        let h = g.add(h, b1)?;
        let h = g.tanh(h)?;
        let out = g.matmul(h, w2)?;
        let out = g.add(out, b2)?;
        let k = g.shape(out)[1];
        g.reshape(out, vec![k])
    }

    /// Vocabulary logits for selected sequence positions (MLM).
    pub fn mlm_logits<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        hidden: Var,
        positions: &[usize],
    ) -> Result<Var> {
        let rows = g.gather_rows(hidden, positions)?;
        let w = self.var("head.mlm.proj.weight");
        let b = self.var("head.mlm.proj.bias");
        let y = g.matmul(rows, w)?;
        g.add(y, b)
    }

    /// One clip end to end: frames -> CNN -> fusion -> positions ->
    /// (optional pixel sampling) -> transformer. Returns the head logits and
    /// the final hidden states.
    pub fn clip_forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        frames: &[Vec<u8>],
        text_ids: &[u16],
        text_real: &[bool],
        head: HeadKind,
        pixel_samples: Option<(usize, &mut Rng)>,
    ) -> Result<(Var, Var)> {
        let maps = self.encode_frames(g, frames)?;
        let fused = self.temporal_fuse(g, &maps)?;
        let mut clip_tokens_var = self.add_grid_positions(g, fused)?;
        if let Some((k, rng)) = pixel_samples {
            clip_tokens_var = self.pixel_random_sample(g, clip_tokens_var, k, rng)?;
        }
        let hidden = self.cross_modal(g, clip_tokens_var, text_ids, text_real)?;
        let logits = self.head_logits(g, hidden, head)?;
        Ok((logits, hidden))
    }
}

/// Pads `[CLS] words [SEP]` to the model's text width; returns ids and the
/// real-position mask.
pub fn assemble_text(words: &[u16], max_words: usize) -> Result<(Vec<u16>, Vec<bool>)> {
    if words.len() > max_words {
        return Err(Error::Input(format!(
            "caption of {} words exceeds maximum {max_words}",
            words.len()
        )));
    }
    let width = max_words + 2;
    let mut ids = Vec::with_capacity(width);
    let mut real = Vec::with_capacity(width);
    ids.push(tokens::CLS);
    real.push(true);
    for &w in words {
        ids.push(w);
        real.push(true);
    }
    ids.push(tokens::SEP);
    real.push(true);
    while ids.len() < width {
        ids.push(tokens::PAD);
        real.push(false);
    }
    Ok((ids, real))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregation::{aggregate_var, mil_loss_var, AggregationKind};

    fn cfg() -> ModelConfig {
        ModelConfig::default()
    }

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            frame_size: 16,
            cnn_channels: vec![8],
            hidden_dim: 16,
            layers: 1,
            heads: 2,
            vocab_size: 16,
            max_text_len: 4,
            num_answers: 4,
        }
    }

    fn frame_of(value: u8, l: usize) -> Vec<u8> {
        vec![value; 3 * l * l]
    }

    #[test]
    fn config_arithmetic_produces_expected_grid() {
        let c = cfg();
        assert_eq!(c.grid_side(), 4);
        assert_eq!(c.clip_tokens(), 16);
        let mut rng = Rng::new(1);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let map = m.encode_frame(&mut g, &frame_of(128, 32)).unwrap();
        assert_eq!(g.shape(map), &[64, 4, 4]);
    }

    #[test]
    fn config_validation_catches_bad_dims() {
        let mut c = cfg();
        c.heads = 5;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.frame_size = 30;
        assert!(c.validate().is_err());
        let mut c = cfg();
        c.layers = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn identical_frames_share_weights() {
        let c = tiny_cfg();
        let mut rng = Rng::new(2);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let mut frame = frame_of(0, 16);
        frame[5] = 200;
        frame[700] = 90;
        let maps = m.encode_frames(&mut g, &[frame.clone(), frame]).unwrap();
        assert_eq!(g.value(maps[0]).data(), g.value(maps[1]).data());
    }

    #[test]
    fn zero_frames_give_identical_bias_only_maps() {
        let c = tiny_cfg();
        let mut rng = Rng::new(3);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let maps = m
            .encode_frames(&mut g, &[frame_of(0, 16), frame_of(0, 16)])
            .unwrap();
        assert_eq!(g.value(maps[0]).data(), g.value(maps[1]).data());
    }

    #[test]
    fn mean_fusion_identities() {
        let c = tiny_cfg();
        let mut rng = Rng::new(4);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);

        let vals: Vec<f64> = (0..16 * 2 * 2).map(|i| (i as f64) * 0.01 - 1.0).collect();
        let map = g.constant(Tensor::from_f64s(vec![16, 2, 2], &vals).unwrap());
        // T = 1: identity
        let fused = m.temporal_fuse(&mut g, &[map]).unwrap();
        assert_eq!(g.value(fused).data(), g.value(map).data());
        // mean of two identical maps: that map
        let fused2 = m.temporal_fuse(&mut g, &[map, map]).unwrap();
        for (a, b) in g.value(fused2).data().iter().zip(g.value(map).data()) {
            assert!((a - b).abs() < 1e-12);
        }
        // mean of {map, -map}: zero
        let neg = g.scale(map, -1.0).unwrap();
        let fused3 = m.temporal_fuse(&mut g, &[map, neg]).unwrap();
        assert!(g.value(fused3).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn conv_fusions_preserve_grid_shape() {
        let c = tiny_cfg();
        for fusion in [TemporalFusion::Conv3d, TemporalFusion::Conv2p1d] {
            let mut rng = Rng::new(5);
            let params = Params::<f64>::init(&c, fusion, &mut rng).unwrap();
            let mut g = Graph::new();
            let m = BoundModel::bind(&mut g, &params, &c, fusion, FreezeFlags::none(), false);
            let frames: Vec<Vec<u8>> = (0..2u8).map(|i| frame_of(60 + i * 50, 16)).collect();
            let maps = m.encode_frames(&mut g, &frames).unwrap();
            let fused = m.temporal_fuse(&mut g, &maps).unwrap();
            let grid = c.grid_side();
            assert_eq!(g.shape(fused), &[16, grid, grid], "{fusion:?}");
        }
    }

    #[test]
    fn grid_positions_flatten_row_major_and_add() {
        let c = cfg();
        let mut rng = Rng::new(6);
        let mut params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        // zero embeddings: tokens equal features
        let d = c.hidden_dim;
        let grid = c.grid_side();
        params
            .entries_mut()
            .insert("pos.row".into(), Tensor::zeros(vec![grid, d]));
        params
            .entries_mut()
            .insert("pos.col".into(), Tensor::zeros(vec![grid, d]));
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        // feature map with a marker at cell (r=1, c=2) of channel 0
        let mut vals = vec![0.0f64; d * grid * grid];
        vals[grid + 2] = 42.0; // channel 0, row 1, col 2
        let map = g.constant(Tensor::from_f64s(vec![d, grid, grid], &vals).unwrap());
        let toks = m.add_grid_positions(&mut g, map).unwrap();
        assert_eq!(g.shape(toks), &[16, d]);
        // row-major: cell (1,2) of a 4x4 grid is token 6
        assert_eq!(g.value(toks).data()[6 * d], 42.0);
        let total: f64 = g.value(toks).data().iter().sum();
        assert_eq!(total, 42.0);
    }

    #[test]
    fn grid_positions_additive_structure() {
        let c = cfg();
        let mut rng = Rng::new(7);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let d = c.hidden_dim;
        let grid = c.grid_side();
        let zero_map = g.constant(Tensor::zeros(vec![d, grid, grid]));
        let toks = m.add_grid_positions(&mut g, zero_map).unwrap();
        let row_emb = params.get("pos.row").unwrap().data().to_vec();
        let col_emb = params.get("pos.col").unwrap().data().to_vec();
        // token(r, c) = rowEmb[r] + colEmb[c]
        for r in 0..grid {
            for cc in 0..grid {
                let tok = &g.value(toks).data()[(r * grid + cc) * d..(r * grid + cc + 1) * d];
                for j in 0..d {
                    let want = row_emb[r * d + j] + col_emb[cc * d + j];
                    assert!((tok[j] - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn text_encoding_minimal_and_position_difference() {
        let c = cfg();
        let mut rng = Rng::new(8);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        // minimal sequence: just the specials
        let minimal = m.encode_text(&mut g, &[tokens::CLS, tokens::SEP]).unwrap();
        assert_eq!(g.shape(minimal), &[2, c.hidden_dim]);

        // same word at positions 0 and 3 differs exactly by the position rows
        let w = tokens::FIRST_WORD;
        let seq = [w, tokens::SEP, tokens::SEP, w];
        let enc = m.encode_text(&mut g, &seq).unwrap();
        let d = c.hidden_dim;
        let pos = params.get("text.pos_emb").unwrap().data().to_vec();
        for j in 0..d {
            let diff = g.value(enc).data()[3 * d + j] - g.value(enc).data()[j];
            let want = pos[3 * d + j] - pos[j];
            assert!((diff - want).abs() < 1e-12);
        }

        // determinism: a second pass gives bit-identical rows
        let enc2 = m.encode_text(&mut g, &seq).unwrap();
        assert_eq!(g.value(enc).data(), g.value(enc2).data());
    }

    #[test]
    fn text_encoding_rejects_bad_input() {
        let c = tiny_cfg();
        let mut rng = Rng::new(9);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        assert!(matches!(m.encode_text(&mut g, &[99]), Err(Error::Input(_))));
        let too_long = vec![tokens::PAD; c.max_text_len + 3];
        assert!(matches!(m.encode_text(&mut g, &too_long), Err(Error::Input(_))));
    }

    #[test]
    fn head_output_lengths_follow_contract() {
        let c = tiny_cfg(); // num_answers = 4
        let mut rng = Rng::new(10);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let (ids, real) = assemble_text(&[tokens::FIRST_WORD], c.max_text_len).unwrap();
        let frames = vec![frame_of(100, 16)];
        let (retrieval, _) = m
            .clip_forward(&mut g, &frames, &ids, &real, HeadKind::Retrieval, None)
            .unwrap();
        assert_eq!(g.shape(retrieval), &[2]);
        let (qa, _) = m
            .clip_forward(&mut g, &frames, &ids, &real, HeadKind::Qa, None)
            .unwrap();
        assert_eq!(g.shape(qa), &[4]);
        let (itm, _) = m
            .clip_forward(&mut g, &frames, &ids, &real, HeadKind::Itm, None)
            .unwrap();
        assert_eq!(g.shape(itm), &[2]);
    }

    #[test]
    fn padding_mask_leaves_cls_logits_unchanged() {
        let c = tiny_cfg();
        let mut rng = Rng::new(11);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let frames = vec![frame_of(77, 16)];
        let words = [tokens::FIRST_WORD, tokens::FIRST_WORD + 1];
        // truncated: exactly [CLS] w w [SEP]
        let ids_short = vec![tokens::CLS, words[0], words[1], tokens::SEP];
        let real_short = vec![true; 4];
        let (short, _) = m
            .clip_forward(&mut g, &frames, &ids_short, &real_short, HeadKind::Retrieval, None)
            .unwrap();
        // padded to full width
        let (ids_pad, real_pad) = assemble_text(&words, c.max_text_len).unwrap();
        let (padded, _) = m
            .clip_forward(&mut g, &frames, &ids_pad, &real_pad, HeadKind::Retrieval, None)
            .unwrap();
        for (a, b) in g.value(short).data().iter().zip(g.value(padded).data()) {
            assert!((a - b).abs() <= 1e-9, "{a} vs {b}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let c = tiny_cfg();
        let mut rng = Rng::new(12);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let run = || -> Vec<f64> {
            let mut g = Graph::new();
            let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
            let (ids, real) = assemble_text(&[tokens::FIRST_WORD + 2], c.max_text_len).unwrap();
            let (logits, _) = m
                .clip_forward(&mut g, &[frame_of(33, 16)], &ids, &real, HeadKind::Retrieval, None)
                .unwrap();
            g.value(logits).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn attention_rows_are_distributions() {
        let c = tiny_cfg();
        let mut rng = Rng::new(13);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let n = 6;
        let d = c.hidden_dim;
        let vals: Vec<f64> = (0..n * d).map(|i| ((i * 37) % 11) as f64 * 0.1 - 0.5).collect();
        let x = g.constant(Tensor::from_f64s(vec![n, d], &vals).unwrap());
        // mask out the last position as a key
        let mut mask = vec![0.0; n];
        mask[n - 1] = -1e30;
        let key_mask = g.constant(Tensor::from_f64s(vec![1, n], &mask).unwrap());
        let (_, attns) = m.attention(&mut g, x, 0, key_mask).unwrap();
        assert_eq!(attns.len(), c.heads);
        for attn in attns {
            let a = g.value(attn).data().to_vec();
            for row in 0..n {
                let row_vals = &a[row * n..(row + 1) * n];
                let sum: f64 = row_vals.iter().sum();
                assert!((sum - 1.0).abs() < 1e-9, "row {row} sums to {sum}");
                assert_eq!(row_vals[n - 1], 0.0, "masked key must get zero weight");
            }
        }
    }

    #[test]
    fn pixel_sampling_cardinality_and_identity() {
        let c = cfg();
        let mut rng = Rng::new(14);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let n = c.clip_tokens();
        let d = c.hidden_dim;
        let vals: Vec<f64> = (0..n * d).map(|i| i as f64).collect();
        let toks = g.constant(Tensor::from_f64s(vec![n, d], &vals).unwrap());
        // k = all cells: the full set survives
        let all = m.pixel_random_sample(&mut g, toks, n, &mut rng).unwrap();
        assert_eq!(g.value(all).data(), g.value(toks).data());
        // k = 10: exactly 10 distinct rows
        let ten = m.pixel_random_sample(&mut g, toks, 10, &mut rng).unwrap();
        assert_eq!(g.shape(ten), &[10, d]);
        let mut firsts: Vec<f64> = (0..10).map(|r| g.value(ten).data()[r * d]).collect();
        firsts.dedup();
        assert_eq!(firsts.len(), 10);
        // k out of range
        assert!(m.pixel_random_sample(&mut g, toks, n + 1, &mut rng).is_err());
    }

    #[test]
    fn pixel_sampling_is_uniform_over_cells() {
        // each cell should appear with frequency k / n; chi-square with
        // n - 1 = 15 dof, p = 0.01 critical value 30.578
        let c = cfg();
        let n = c.clip_tokens();
        let k = 10;
        let mut rng = Rng::new(99);
        let draws = 100_000;
        let mut counts = vec![0usize; n];
        for _ in 0..draws {
            for cell in rng.choose_distinct(n, k) {
                counts[cell] += 1;
            }
        }
        let expect = draws as f64 * k as f64 / n as f64;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expect).powi(2) / expect)
            .sum();
        assert!(chi2 < 30.578, "chi-square {chi2} rejects uniform cell use");
    }

    #[test]
    fn permuting_clips_permutes_logits() {
        let c = tiny_cfg();
        let mut rng = Rng::new(15);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let mut g = Graph::new();
        let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, FreezeFlags::none(), false);
        let (ids, real) = assemble_text(&[tokens::FIRST_WORD], c.max_text_len).unwrap();
        let clips: Vec<Vec<Vec<u8>>> = (0..3u8)
            .map(|i| vec![frame_of(40 + 60 * i, 16)])
            .collect();
        let logits: Vec<Vec<f64>> = clips
            .iter()
            .map(|frames| {
                let (l, _) = m
                    .clip_forward(&mut g, frames, &ids, &real, HeadKind::Retrieval, None)
                    .unwrap();
                g.value(l).data().to_vec()
            })
            .collect();
        let permuted: Vec<Vec<f64>> = [2usize, 0, 1]
            .iter()
            .map(|&i| {
                let (l, _) = m
                    .clip_forward(&mut g, &clips[i], &ids, &real, HeadKind::Retrieval, None)
                    .unwrap();
                g.value(l).data().to_vec()
            })
            .collect();
        assert_eq!(permuted[0], logits[2]);
        assert_eq!(permuted[1], logits[0]);
        assert_eq!(permuted[2], logits[1]);
    }

    #[test]
    fn freeze_flags_stop_encoder_gradients_exactly() {
        let c = tiny_cfg();
        let mut rng = Rng::new(16);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let (ids, real) = assemble_text(&[tokens::FIRST_WORD + 1], c.max_text_len).unwrap();
        let run = |freeze: FreezeFlags| -> BTreeMap<String, Vec<f64>> {
            let mut g = Graph::new();
            let m = BoundModel::bind(&mut g, &params, &c, TemporalFusion::Mean, freeze, true);
            let mut frame = frame_of(10, 16);
            frame[40] = 250;
            let (logits, _) = m
                .clip_forward(&mut g, &[frame], &ids, &real, HeadKind::Retrieval, None)
                .unwrap();
            let pred = aggregate_var(&mut g, AggregationKind::LogSumExp, &[logits]).unwrap();
            let loss = mil_loss_var(&mut g, pred, 0).unwrap();
            g.backward(loss).unwrap();
            m.collect_grads(&g)
        };
        let free = run(FreezeFlags::none());
        let frozen = run(FreezeFlags::both());
        // unfrozen: gradient reaches the CNN and the word embedding
        assert!(free.keys().any(|k| k.starts_with("vision.")));
        assert!(free.contains_key("text.word_emb"));
        // frozen: exactly absent there, identical elsewhere
        assert!(!frozen.keys().any(|k| k.starts_with("vision.")));
        assert!(!frozen.contains_key("text.word_emb"));
        for (name, grad) in &frozen {
            let other = &free[name];
            for (a, b) in grad.iter().zip(other) {
                assert!((a - b).abs() < 1e-12, "grad for {name} changed under freezing");
            }
        }
    }

    #[test]
    fn checkpoint_roundtrip_preserves_arch_hash() {
        let c = tiny_cfg();
        let mut rng = Rng::new(17);
        let params = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        params.save(&path).unwrap();
        let mut rng2 = Rng::new(999);
        let mut reloaded = Params::<f64>::init(&c, TemporalFusion::Mean, &mut rng2).unwrap();
        let missing = reloaded.load_from(&path).unwrap();
        assert!(missing.is_empty());
        assert_eq!(reloaded.arch_hash(), params.arch_hash());
        assert_eq!(reloaded, params);
    }
}

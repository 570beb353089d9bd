//! The full conditional model p(Y|X): encoder, attention variant, decoder
//! recurrence, optional contextualization, and the output softmax, plus the
//! binary checkpoint format.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::io::Read;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{attend, AlphaSlice, AnnotationSet, Variant};
use crate::data::{BOS_ID, EOS_ID};
use crate::error::{Error, Result};
use crate::layers::{
    affine, bidirectional_encode, ffnn, glorot_uniform, zero_bias, FfnnIds, LstmCellIds,
    LstmGateIds, LstmState,
};
use crate::numerics::{Graph, Tensor, TensorId};

const CHECKPOINT_MAGIC: &[u8; 6] = b"FGNMT\0";
const CHECKPOINT_VERSION: u32 = 1;

/// Hyperparameters and sizes. `full_scale` is the production-sized
/// configuration; toy configurations shrink everything but keep the score
/// network's hidden width at twice the recurrent hidden size, mirroring the
/// 2K-on-1K ratio of the full setup.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub variant: Variant,
    pub contextualization: bool,
    pub src_vocab: usize,
    pub tgt_vocab: usize,
    pub emb_dim: usize,
    pub hidden_dim: usize,
    pub align_hidden_dim: usize,
    /// Train the encoder's initial recurrent states instead of fixing them
    /// to zero.
    pub trained_init_states: bool,
    pub seed: u64,
}

impl ModelConfig {
    /// Full-scale defaults: 30K vocabularies, 620-dimensional embeddings,
    /// 1K hidden units (annotation dimension 2000), 2K alignment hidden
    /// units.
    pub fn full_scale(variant: Variant) -> Self {
        ModelConfig {
            variant,
            contextualization: false,
            src_vocab: 30000,
            tgt_vocab: 30000,
            emb_dim: 620,
            hidden_dim: 1000,
            align_hidden_dim: 2000,
            trained_init_states: false,
            seed: 0,
        }
    }

    /// Desk-scale configuration for toy tasks and tests.
    pub fn toy(
        variant: Variant,
        contextualization: bool,
        src_vocab: usize,
        tgt_vocab: usize,
        emb_dim: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Self {
        ModelConfig {
            variant,
            contextualization,
            src_vocab,
            tgt_vocab,
            emb_dim,
            hidden_dim,
            align_hidden_dim: 2 * hidden_dim,
            trained_init_states: false,
            seed,
        }
    }

    /// Annotation dimension D = 2 · hidden_dim.
    pub fn annotation_dim(&self) -> usize {
        2 * self.hidden_dim
    }

    fn score_input_dim(&self) -> usize {
        let base = self.hidden_dim + self.annotation_dim();
        if self.variant.uses_target_embedding() {
            base + self.emb_dim
        } else {
            base
        }
    }

    fn score_output_dim(&self) -> usize {
        if self.variant.is_fine_grained() {
            self.annotation_dim()
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let sizes = [
            self.src_vocab,
            self.tgt_vocab,
            self.emb_dim,
            self.hidden_dim,
            self.align_hidden_dim,
        ];
        if sizes.iter().any(|&s| s == 0) {
            return Err(Error::Contract("all model sizes must be positive".into()));
        }
        if self.src_vocab <= crate::data::RESERVED || self.tgt_vocab <= crate::data::RESERVED {
            return Err(Error::Contract(
                "vocabularies must be larger than the reserved ids".into(),
            ));
        }
        Ok(())
    }

    fn to_header_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "variant={}", self.variant);
        let _ = writeln!(s, "contextualization={}", self.contextualization as u8);
        let _ = writeln!(s, "src_vocab={}", self.src_vocab);
        let _ = writeln!(s, "tgt_vocab={}", self.tgt_vocab);
        let _ = writeln!(s, "emb_dim={}", self.emb_dim);
        let _ = writeln!(s, "hidden_dim={}", self.hidden_dim);
        let _ = writeln!(s, "align_hidden_dim={}", self.align_hidden_dim);
        let _ = writeln!(s, "trained_init_states={}", self.trained_init_states as u8);
        let _ = writeln!(s, "seed={}", self.seed);
        s
    }

    fn from_header_text(text: &str) -> Result<Self> {
        let mut fields: BTreeMap<&str, &str> = BTreeMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("malformed header line '{line}'")))?;
            fields.insert(key, value);
        }
        let get = |key: &str| -> Result<&str> {
            fields
                .get(key)
                .copied()
                .ok_or_else(|| Error::Format(format!("missing header field '{key}'")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Format(format!("bad value for '{key}'")))
        };
        let parse_bool = |key: &str| -> Result<bool> {
            match get(key)? {
                "0" => Ok(false),
                "1" => Ok(true),
                other => Err(Error::Format(format!("bad flag value '{other}' for '{key}'"))),
            }
        };
        let config = ModelConfig {
            variant: Variant::parse(get("variant")?)?,
            contextualization: parse_bool("contextualization")?,
            src_vocab: parse_usize("src_vocab")?,
            tgt_vocab: parse_usize("tgt_vocab")?,
            emb_dim: parse_usize("emb_dim")?,
            hidden_dim: parse_usize("hidden_dim")?,
            align_hidden_dim: parse_usize("align_hidden_dim")?,
            trained_init_states: parse_bool("trained_init_states")?,
            seed: get("seed")?
                .parse()
                .map_err(|_| Error::Format("bad value for 'seed'".into()))?,
        };
        let known = [
            "variant",
            "contextualization",
            "src_vocab",
            "tgt_vocab",
            "emb_dim",
            "hidden_dim",
            "align_hidden_dim",
            "trained_init_states",
            "seed",
        ];
        for key in fields.keys() {
            if !known.contains(key) {
                return Err(Error::Format(format!("unknown header field '{key}'")));
            }
        }
        Ok(config)
    }
}

/// All learnable weights, keyed by name. Iteration order is the sorted name
/// order, which keeps checkpoints and gradient extraction deterministic.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ModelParams {
    map: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.map
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.map
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter '{name}'")))
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.map.insert(name.into(), tensor);
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.map.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.map.keys()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Total number of scalar coordinates.
    pub fn total_coords(&self) -> usize {
        self.map.values().map(Tensor::numel).sum()
    }
}

/// Names and shapes of every parameter implied by a configuration, in
/// creation order (which fixes the seeding of the initializer).
fn param_specs(config: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let e = config.emb_dim;
    let h = config.hidden_dim;
    let d = config.annotation_dim();
    let mut specs: Vec<(String, Vec<usize>)> = Vec::new();

    specs.push(("emb.src".into(), vec![e, config.src_vocab]));
    specs.push(("emb.tgt".into(), vec![e, config.tgt_vocab]));

    for dir in ["fwd", "bwd"] {
        for gate in ["i", "f", "o", "g"] {
            specs.push((format!("enc.{dir}.{gate}.wx"), vec![h, e]));
            specs.push((format!("enc.{dir}.{gate}.wh"), vec![h, h]));
            specs.push((format!("enc.{dir}.{gate}.b"), vec![h]));
        }
    }
    if config.trained_init_states {
        for dir in ["fwd", "bwd"] {
            specs.push((format!("enc.{dir}.h0"), vec![h]));
            specs.push((format!("enc.{dir}.c0"), vec![h]));
        }
    }

    // Decoder LSTM input is [y_prev; context].
    let dec_in = e + d;
    for gate in ["i", "f", "o", "g"] {
        specs.push((format!("dec.{gate}.wx"), vec![h, dec_in]));
        specs.push((format!("dec.{gate}.wh"), vec![h, h]));
        specs.push((format!("dec.{gate}.b"), vec![h]));
    }

    specs.push(("init.w".into(), vec![h, d]));
    specs.push(("init.b".into(), vec![h]));

    specs.push((
        "att.w1".into(),
        vec![config.align_hidden_dim, config.score_input_dim()],
    ));
    specs.push(("att.b1".into(), vec![config.align_hidden_dim]));
    specs.push((
        "att.w2".into(),
        vec![config.score_output_dim(), config.align_hidden_dim],
    ));
    specs.push(("att.b2".into(), vec![config.score_output_dim()]));

    specs.push(("out.w".into(), vec![config.tgt_vocab, h]));
    specs.push(("out.b".into(), vec![config.tgt_vocab]));

    if config.contextualization {
        specs.push(("ctx.w1".into(), vec![e, e]));
        specs.push(("ctx.b1".into(), vec![e]));
        specs.push(("ctx.w2".into(), vec![e, e]));
        specs.push(("ctx.b2".into(), vec![e]));
    }
    specs
}

/// Decoder recurrence state: hidden vector, memory cell, and the step index,
/// which increments by exactly one per decoder step.
#[derive(Debug, Clone, Copy)]
pub struct DecoderState {
    pub z: TensorId,
    pub cell: TensorId,
    pub step: usize,
}

/// The result of one decoder step.
#[derive(Debug)]
pub struct StepOutput {
    /// Log-probabilities over the target vocabulary; exponentiates to a
    /// distribution summing to 1.
    pub log_probs: TensorId,
    /// Attention weights recorded for this step, detached from the graph.
    pub alpha: AlphaSlice,
    pub state: DecoderState,
}

/// A trainable translation model: configuration plus named parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    /// Initializes all parameters from the configuration seed: Glorot
    /// uniform for matrices, zeros for biases and vectors.
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut params = ModelParams::default();
        for (name, shape) in param_specs(&config) {
            let tensor = match shape.len() {
                2 => glorot_uniform(&mut rng, shape[0], shape[1]),
                1 => zero_bias(shape[0]),
                _ => unreachable!("parameters are vectors or matrices"),
            };
            params.insert(name, tensor);
        }
        Ok(Model { config, params })
    }

    /// Binds every parameter into a graph. With `trainable`, leaves keep
    /// their `requires_grad` flag so gradients accumulate; otherwise they
    /// are constants, which skips all bookkeeping during decoding.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundModel {
        let mut ids = BTreeMap::new();
        for (name, tensor) in self.params.iter() {
            let id = if trainable {
                g.leaf(tensor.clone())
            } else {
                g.constant(tensor.clone())
            };
            ids.insert(name.clone(), id);
        }
        BoundModel {
            config: self.config.clone(),
            ids,
        }
    }

    /// Mean log p(Y|X) machinery for callers that only need the value.
    pub fn sentence_log_likelihood(&self, src: &[usize], tgt: &[usize]) -> Result<f64> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let ll = bound.sentence_log_likelihood(&mut g, src, tgt)?;
        Ok(g.value(ll).data()[0])
    }

    /// Configuration string plus an FNV-1a digest of every parameter byte.
    pub fn fingerprint(&self) -> String {
        let mut hash: u64 = 0xcbf29ce484222325;
        let mut feed = |bytes: &[u8]| {
            for &b in bytes {
                hash ^= b as u64;
                hash = hash.wrapping_mul(0x100000001b3);
            }
        };
        for (name, tensor) in self.params.iter() {
            feed(name.as_bytes());
            for &v in tensor.data() {
                feed(&v.to_le_bytes());
            }
        }
        format!(
            "{}-ctx{}-e{}h{}a{}-v{}x{}-seed{}-{hash:016x}",
            self.config.variant,
            self.config.contextualization as u8,
            self.config.emb_dim,
            self.config.hidden_dim,
            self.config.align_hidden_dim,
            self.config.src_vocab,
            self.config.tgt_vocab,
            self.config.seed
        )
    }

    /// Rebuilds this model as the fine-grained variant whose score network
    /// emits the same score on every dimension: `att.w2` rows and `att.b2`
    /// entries are duplicated from the temporal scorer, everything else is
    /// shared. By construction the per-step log-probabilities match the
    /// source model's exactly.
    pub fn with_dimension_constant_scores(&self) -> Result<Model> {
        if self.config.variant != Variant::AttY {
            return Err(Error::Contract(
                "dimension-constant construction starts from an atty model".into(),
            ));
        }
        let mut config = self.config.clone();
        config.variant = Variant::AttY2D;
        let d = config.annotation_dim();
        let a = config.align_hidden_dim;

        let mut params = self.params.clone();
        let w2 = self.params.get("att.w2")?;
        let row = &w2.data()[..a];
        let w2_wide = Tensor::new(row.iter().cycle().take(a * d).cloned().collect(), &[d, a])?
            .with_requires_grad();
        let b2_wide = Tensor::full(&[d], self.params.get("att.b2")?.data()[0]).with_requires_grad();
        params.insert("att.w2", w2_wide);
        params.insert("att.b2", b2_wide);
        Ok(Model { config, params })
    }

    // ── checkpoint format ───────────────────────────────────────────────

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let header = self.config.to_header_text();
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        for (name, tensor) in self.params.iter() {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(tensor.rank() as u32).to_le_bytes());
            for &extent in tensor.shape() {
                out.extend_from_slice(&(extent as u32).to_le_bytes());
            }
            for &v in tensor.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        let mut magic = [0u8; 6];
        read_exact(&mut r, &mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a model checkpoint (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Format(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let header_len = read_u32(&mut r)? as usize;
        let mut header = vec![0u8; header_len];
        read_exact(&mut r, &mut header)?;
        let header = String::from_utf8(header)
            .map_err(|_| Error::Format("checkpoint header is not UTF-8".into()))?;
        let config = ModelConfig::from_header_text(&header)?;

        let mut params = ModelParams::default();
        while !r.is_empty() {
            let name_len = read_u32(&mut r)? as usize;
            let mut name = vec![0u8; name_len];
            read_exact(&mut r, &mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?;
            let rank = read_u32(&mut r)? as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(read_u32(&mut r)? as usize);
            }
            let numel: usize = shape.iter().product();
            let mut data = Vec::with_capacity(numel);
            for _ in 0..numel {
                let mut buf = [0u8; 8];
                read_exact(&mut r, &mut buf)?;
                data.push(f64::from_le_bytes(buf));
            }
            params.insert(name, Tensor::new(data, &shape)?.with_requires_grad());
        }

        // The stored parameters must exactly match what the config implies.
        let expected = param_specs(&config);
        if expected.len() != params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} parameters but the config implies {}",
                params.len(),
                expected.len()
            )));
        }
        for (name, shape) in &expected {
            let tensor = params
                .get(name)
                .map_err(|_| Error::Format(format!("checkpoint is missing parameter '{name}'")))?;
            if tensor.shape() != shape.as_slice() {
                return Err(Error::Format(format!(
                    "parameter '{name}' has shape {:?} but the config implies {:?}",
                    tensor.shape(),
                    shape
                )));
            }
        }
        Ok(Model { config, params })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Model::from_bytes(&std::fs::read(path)?)
    }
}

fn read_exact(r: &mut &[u8], buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf)
        .map_err(|_| Error::Format("checkpoint truncated".into()))
}

fn read_u32(r: &mut &[u8]) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_exact(r, &mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Mean-pooled context enrichment: `c = (1/T) Σ_t N(x_t)` added to every
/// embedding row, so a zero-initialized network is the identity.
pub fn contextualize(g: &mut Graph, net: &FfnnIds, embeddings: TensorId) -> Result<TensorId> {
    let shape = g.value(embeddings).shape().to_vec();
    if shape.len() != 2 {
        return Err(Error::dimension("contextualize", &shape, &[]));
    }
    let (t_len, emb_dim) = (shape[0], shape[1]);
    if t_len == 0 {
        return Err(Error::Contract("cannot contextualize an empty sequence".into()));
    }
    let mut pooled = None;
    for t in 0..t_len {
        let x_t = g.row(embeddings, t)?;
        let enriched = ffnn(g, net, x_t)?;
        if g.value(enriched).numel() != emb_dim {
            return Err(Error::dimension(
                "contextualize",
                g.value(enriched).shape(),
                &[emb_dim],
            ));
        }
        pooled = Some(match pooled {
            None => enriched,
            Some(acc) => g.add(acc, enriched)?,
        });
    }
    let context = g.scale(pooled.expect("t_len >= 1"), 1.0 / t_len as f64);
    let mut rows = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x_t = g.row(embeddings, t)?;
        rows.push(g.add(x_t, context)?);
    }
    g.stack_rows(&rows)
}

/// A model's parameters bound into one graph.
pub struct BoundModel {
    pub config: ModelConfig,
    ids: BTreeMap<String, TensorId>,
}

impl BoundModel {
    pub fn id(&self, name: &str) -> TensorId {
        *self
            .ids
            .get(name)
            .unwrap_or_else(|| panic!("parameter '{name}' not bound"))
    }

    pub fn param_ids(&self) -> impl Iterator<Item = (&String, TensorId)> {
        self.ids.iter().map(|(n, &id)| (n, id))
    }

    fn lstm(&self, prefix: &str) -> LstmCellIds {
        let gate = |name: &str| LstmGateIds {
            w_x: self.id(&format!("{prefix}.{name}.wx")),
            w_h: self.id(&format!("{prefix}.{name}.wh")),
            b: self.id(&format!("{prefix}.{name}.b")),
        };
        LstmCellIds {
            input: gate("i"),
            forget: gate("f"),
            output: gate("o"),
            candidate: gate("g"),
        }
    }

    fn score_net(&self) -> FfnnIds {
        FfnnIds {
            w1: self.id("att.w1"),
            b1: self.id("att.b1"),
            w2: self.id("att.w2"),
            b2: self.id("att.b2"),
        }
    }

    /// Embeds the source ids, optionally contextualizes them, and runs the
    /// bidirectional encoder.
    pub fn encode_source(&self, g: &mut Graph, src: &[usize]) -> Result<AnnotationSet> {
        if src.is_empty() {
            return Err(Error::Contract("cannot encode an empty source".into()));
        }
        let mut emb = g.lookup(self.id("emb.src"), src)?;
        if self.config.contextualization {
            let net = FfnnIds {
                w1: self.id("ctx.w1"),
                b1: self.id("ctx.b1"),
                w2: self.id("ctx.w2"),
                b2: self.id("ctx.b2"),
            };
            emb = contextualize(g, &net, emb)?;
        }
        let initial = if self.config.trained_init_states {
            Some((
                LstmState {
                    h: self.id("enc.fwd.h0"),
                    c: self.id("enc.fwd.c0"),
                },
                LstmState {
                    h: self.id("enc.bwd.h0"),
                    c: self.id("enc.bwd.c0"),
                },
            ))
        } else {
            None
        };
        let h = bidirectional_encode(
            g,
            &self.lstm("enc.fwd"),
            &self.lstm("enc.bwd"),
            emb,
            initial,
        )?;
        AnnotationSet::from_tensor(g, h)
    }

    /// Initial decoder state: `z_0 = tanh(W · mean(h) + b)`, zero memory
    /// cell, step index 0.
    pub fn init_decoder_state(
        &self,
        g: &mut Graph,
        annotations: &AnnotationSet,
    ) -> Result<DecoderState> {
        let summed = g.sum_axis(annotations.h, 0)?;
        let mean = g.scale(summed, 1.0 / annotations.len as f64);
        let pre = affine(g, self.id("init.w"), mean, Some(self.id("init.b")))?;
        let z = g.tanh(pre);
        let cell = g.constant(Tensor::zeros(&[self.config.hidden_dim]));
        Ok(DecoderState { z, cell, step: 0 })
    }

    /// One decoder step: attention per the configured variant, the decoder
    /// LSTM update, and the log-softmax over the target vocabulary.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        state: &DecoderState,
        y_prev_id: usize,
        annotations: &AnnotationSet,
    ) -> Result<StepOutput> {
        if y_prev_id >= self.config.tgt_vocab {
            return Err(Error::Vocabulary(format!(
                "target id {y_prev_id} out of range for vocabulary of size {}",
                self.config.tgt_vocab
            )));
        }
        let y_rows = g.lookup(self.id("emb.tgt"), &[y_prev_id])?;
        let y_emb = g.row(y_rows, 0)?;

        let score_net = self.score_net();
        let (context, alpha) = attend(
            g,
            self.config.variant,
            &score_net,
            state.z,
            Some(y_emb),
            annotations,
        )?;

        let x = g.concat(&[y_emb, context])?;
        let next = crate::layers::lstm_step(
            g,
            &self.lstm("dec"),
            x,
            &LstmState {
                h: state.z,
                c: state.cell,
            },
        )?;
        let logits = affine(g, self.id("out.w"), next.h, Some(self.id("out.b")))?;
        let log_probs = g.log_softmax(logits)?;
        Ok(StepOutput {
            log_probs,
            alpha,
            state: DecoderState {
                z: next.h,
                cell: next.c,
                step: state.step + 1,
            },
        })
    }

    /// Teacher-forced log-likelihood `Σ_t' log p(w_t' | w_<t', X)`. The
    /// target must end with the end-of-sentence id.
    pub fn sentence_log_likelihood(
        &self,
        g: &mut Graph,
        src: &[usize],
        tgt: &[usize],
    ) -> Result<TensorId> {
        if tgt.is_empty() {
            return Err(Error::Contract("target sequence is empty".into()));
        }
        if *tgt.last().unwrap() != EOS_ID {
            return Err(Error::Contract(
                "target must end with the end-of-sentence id".into(),
            ));
        }
        let annotations = self.encode_source(g, src)?;
        let mut state = self.init_decoder_state(g, &annotations)?;
        let mut total: Option<TensorId> = None;
        for (t, &token) in tgt.iter().enumerate() {
            if token >= self.config.tgt_vocab {
                return Err(Error::Vocabulary(format!(
                    "target id {token} out of range for vocabulary of size {}",
                    self.config.tgt_vocab
                )));
            }
            let y_prev = if t == 0 { BOS_ID } else { tgt[t - 1] };
            let step = self.decoder_step(g, &state, y_prev, &annotations)?;
            let term = g.pick(step.log_probs, token)?;
            total = Some(match total {
                None => term,
                Some(acc) => g.add(acc, term)?,
            });
            state = step.state;
        }
        Ok(total.expect("target is non-empty"))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::grad_check;
    use rand::Rng;

    pub(crate) fn tiny_config(variant: Variant, contextualization: bool, seed: u64) -> ModelConfig {
        ModelConfig::toy(variant, contextualization, 8, 8, 4, 3, seed)
    }

    #[test]
    fn full_scale_configuration_dimensions() {
        let config = ModelConfig::full_scale(Variant::AttY2D);
        assert_eq!(config.annotation_dim(), 2000);
        assert_eq!(config.align_hidden_dim, 2000);
        assert_eq!(config.emb_dim, 620);
        assert_eq!(config.src_vocab, 30000);
        assert_eq!(config.score_output_dim(), 2000);
    }

    #[test]
    fn toy_config_keeps_score_width_ratio() {
        let config = ModelConfig::toy(Variant::Att, false, 10, 10, 8, 6, 0);
        assert_eq!(config.align_hidden_dim, 2 * config.hidden_dim);
    }

    #[test]
    fn config_header_round_trip() {
        let config = tiny_config(Variant::AttY2D, true, 99);
        let text = config.to_header_text();
        let back = ModelConfig::from_header_text(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn header_rejects_unknown_fields() {
        let config = tiny_config(Variant::Att, false, 0);
        let mut text = config.to_header_text();
        text.push_str("mystery=1\n");
        assert!(matches!(
            ModelConfig::from_header_text(&text),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn contextualize_zero_network_is_identity() {
        let mut g = Graph::new();
        let net = FfnnIds {
            w1: g.constant(Tensor::zeros(&[4, 4])),
            b1: g.constant(Tensor::zeros(&[4])),
            w2: g.constant(Tensor::zeros(&[4, 4])),
            b2: g.constant(Tensor::zeros(&[4])),
        };
        let emb = g.constant(Tensor::from_fn(&[3, 4], |i| i as f64));
        let out = contextualize(&mut g, &net, emb).unwrap();
        assert_eq!(g.value(out).data(), g.value(emb).data());
    }

    #[test]
    fn contextualize_single_row_uses_its_own_context() {
        let mut rng = ChaCha8Rng::seed_from_u64(50);
        let mut g = Graph::new();
        let net = FfnnIds {
            w1: g.constant(Tensor::from_fn(&[4, 4], |_| rng.random_range(-0.5..0.5))),
            b1: g.constant(Tensor::from_fn(&[4], |_| rng.random_range(-0.5..0.5))),
            w2: g.constant(Tensor::from_fn(&[4, 4], |_| rng.random_range(-0.5..0.5))),
            b2: g.constant(Tensor::from_fn(&[4], |_| rng.random_range(-0.5..0.5))),
        };
        let emb = g.constant(Tensor::from_fn(&[1, 4], |i| 0.1 * i as f64));
        let out = contextualize(&mut g, &net, emb).unwrap();
        let x1 = g.row(emb, 0).unwrap();
        let enriched = ffnn(&mut g, &net, x1).unwrap();
        let expected = g.add(x1, enriched).unwrap();
        assert_eq!(g.value(out).data(), g.value(expected).data());
    }

    #[test]
    fn contextualize_pooled_context_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(51);
        let model = Model::new(tiny_config(Variant::Att, true, 7)).unwrap();
        let base: Vec<usize> = vec![3, 4, 5, 6];
        let permuted: Vec<usize> = vec![6, 3, 5, 4];
        let _ = &mut rng;

        let enriched = |ids: &[usize]| {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let emb = g.lookup(bound.id("emb.src"), ids).unwrap();
            let net = FfnnIds {
                w1: bound.id("ctx.w1"),
                b1: bound.id("ctx.b1"),
                w2: bound.id("ctx.w2"),
                b2: bound.id("ctx.b2"),
            };
            let out = contextualize(&mut g, &net, emb).unwrap();
            // Subtract the raw embedding to recover the shared context row.
            let raw = g.value(emb).data().to_vec();
            let full = g.value(out).data().to_vec();
            full.iter().zip(raw).map(|(a, b)| a - b).collect::<Vec<f64>>()
        };

        let c1 = enriched(&base);
        let c2 = enriched(&permuted);
        // Every row receives the same context vector, and that vector is
        // invariant to source order.
        for (a, b) in c1.iter().zip(&c2) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn encode_without_contextualization_matches_encoder_directly() {
        let model = Model::new(tiny_config(Variant::Att, false, 3)).unwrap();
        let ids = [4usize, 2, 7];

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ann = bound.encode_source(&mut g, &ids).unwrap();
        let via_model = g.value(ann.h).data().to_vec();

        let mut g2 = Graph::new();
        let bound2 = model.bind(&mut g2, false);
        let emb = g2.lookup(bound2.id("emb.src"), &ids).unwrap();
        let h = bidirectional_encode(
            &mut g2,
            &bound2.lstm("enc.fwd"),
            &bound2.lstm("enc.bwd"),
            emb,
            None,
        )
        .unwrap();
        assert_eq!(via_model, g2.value(h).data());
    }

    #[test]
    fn encode_produces_one_annotation_per_token() {
        let model = Model::new(tiny_config(Variant::AttY, true, 4)).unwrap();
        for t in 1..6 {
            let ids: Vec<usize> = (0..t).map(|i| 3 + (i % 5)).collect();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ann = bound.encode_source(&mut g, &ids).unwrap();
            assert_eq!(ann.len, t);
            assert_eq!(ann.dim, model.config.annotation_dim());
        }
    }

    #[test]
    fn encode_is_deterministic() {
        let model = Model::new(tiny_config(Variant::Att, true, 5)).unwrap();
        let run = || {
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ann = bound.encode_source(&mut g, &[3, 5, 4]).unwrap();
            g.value(ann.h).data().to_vec()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn encode_rejects_empty_source() {
        let model = Model::new(tiny_config(Variant::Att, false, 1)).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        assert!(bound.encode_source(&mut g, &[]).is_err());
    }

    #[test]
    fn decoder_step_emits_normalized_distributions() {
        for variant in Variant::ALL {
            for ctx in [false, true] {
                let model = Model::new(tiny_config(variant, ctx, 6)).unwrap();
                let mut g = Graph::new();
                let bound = model.bind(&mut g, false);
                let ann = bound.encode_source(&mut g, &[3, 4, 5]).unwrap();
                let state = bound.init_decoder_state(&mut g, &ann).unwrap();
                let step = bound.decoder_step(&mut g, &state, BOS_ID, &ann).unwrap();
                let total: f64 = g.value(step.log_probs).data().iter().map(|lp| lp.exp()).sum();
                assert!(
                    (total - 1.0).abs() < 1e-9,
                    "{variant} ctx={ctx}: distribution sums to {total}"
                );
                assert_eq!(step.state.step, 1);
            }
        }
    }

    #[test]
    fn decoder_step_alpha_shape_follows_variant() {
        for variant in Variant::ALL {
            let model = Model::new(tiny_config(variant, false, 7)).unwrap();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ann = bound.encode_source(&mut g, &[3, 4, 5, 6]).unwrap();
            let state = bound.init_decoder_state(&mut g, &ann).unwrap();
            let step = bound.decoder_step(&mut g, &state, BOS_ID, &ann).unwrap();
            match step.alpha {
                AlphaSlice::Temporal(t) => {
                    assert!(!variant.is_fine_grained());
                    assert_eq!(t.shape(), &[4]);
                }
                AlphaSlice::FineGrained(t) => {
                    assert!(variant.is_fine_grained());
                    assert_eq!(t.shape(), &[4, model.config.annotation_dim()]);
                }
            }
        }
    }

    #[test]
    fn single_source_token_forces_full_attention() {
        for variant in Variant::ALL {
            let model = Model::new(tiny_config(variant, false, 8)).unwrap();
            let mut g = Graph::new();
            let bound = model.bind(&mut g, false);
            let ann = bound.encode_source(&mut g, &[5]).unwrap();
            let state = bound.init_decoder_state(&mut g, &ann).unwrap();
            let step = bound.decoder_step(&mut g, &state, BOS_ID, &ann).unwrap();
            match &step.alpha {
                AlphaSlice::Temporal(t) => assert_eq!(t.data(), &[1.0]),
                AlphaSlice::FineGrained(t) => {
                    assert!(t.data().iter().all(|&v| v == 1.0));
                }
            }
        }
    }

    #[test]
    fn decoder_step_rejects_out_of_range_target_id() {
        let model = Model::new(tiny_config(Variant::Att, false, 20)).unwrap();
        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ann = bound.encode_source(&mut g, &[3, 4]).unwrap();
        let state = bound.init_decoder_state(&mut g, &ann).unwrap();
        let err = bound
            .decoder_step(&mut g, &state, model.config.tgt_vocab, &ann)
            .unwrap_err();
        assert!(matches!(err, Error::Vocabulary(_)));
    }

    #[test]
    fn log_likelihood_is_never_positive() {
        let model = Model::new(tiny_config(Variant::AttY, false, 9)).unwrap();
        for seed in 0..5u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let src: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(3..8)).collect();
            let mut tgt: Vec<usize> = (0..rng.random_range(0..4)).map(|_| rng.random_range(3..8)).collect();
            tgt.push(EOS_ID);
            let ll = model.sentence_log_likelihood(&src, &tgt).unwrap();
            assert!(ll <= 0.0, "log-likelihood {ll} must be non-positive");
        }
    }

    #[test]
    fn log_likelihood_matches_manual_step_replay() {
        let model = Model::new(tiny_config(Variant::AttY2D, true, 10)).unwrap();
        let src = [3usize, 6, 4];
        let tgt = [5usize, 7, EOS_ID];

        let total = model.sentence_log_likelihood(&src, &tgt).unwrap();

        let mut g = Graph::new();
        let bound = model.bind(&mut g, false);
        let ann = bound.encode_source(&mut g, &src).unwrap();
        let mut state = bound.init_decoder_state(&mut g, &ann).unwrap();
        let mut replay = 0.0;
        for (t, &token) in tgt.iter().enumerate() {
            let y_prev = if t == 0 { BOS_ID } else { tgt[t - 1] };
            let step = bound.decoder_step(&mut g, &state, y_prev, &ann).unwrap();
            replay += g.value(step.log_probs).data()[token];
            state = step.state;
        }
        assert!((total - replay).abs() < 1e-12);
    }

    #[test]
    fn log_likelihood_requires_terminal_eos() {
        let model = Model::new(tiny_config(Variant::Att, false, 11)).unwrap();
        let err = model.sentence_log_likelihood(&[3, 4], &[5, 6]).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(model.sentence_log_likelihood(&[3], &[]).is_err());
    }

    #[test]
    fn model_gradients_pass_a_spot_check() {
        // The full per-variant sweep lives in the acceptance suite; this
        // checks one parameter per family on a single tiny model.
        let model = Model::new(tiny_config(Variant::AttY2D, true, 12)).unwrap();
        let src = [3usize, 4, 5];
        let tgt = [6usize, 7, EOS_ID];
        for name in ["att.w1", "dec.i.wx", "emb.tgt", "ctx.w2", "init.w", "out.b"] {
            let probe = model.params.get(name).unwrap().clone();
            let err = grad_check(
                |g, id| {
                    let mut bound = model.bind(g, false);
                    bound.ids.insert(name.to_owned(), id);
                    bound.sentence_log_likelihood(g, &src, &tgt)
                },
                &probe,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{name} grad error {err}");
        }
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let model = Model::new(tiny_config(Variant::AttY, true, 13)).unwrap();
        let bytes = model.to_bytes();
        let reloaded = Model::from_bytes(&bytes).unwrap();
        assert_eq!(model, reloaded);
        assert_eq!(bytes, reloaded.to_bytes());
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let model = Model::new(tiny_config(Variant::Att, false, 14)).unwrap();
        let bytes = model.to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 4]).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Model::from_bytes(&bad_magic).is_err());
    }

    #[test]
    fn dimension_constant_fine_grained_matches_atty_model() {
        let atty = Model::new(tiny_config(Variant::AttY, false, 15)).unwrap();
        let atty2d = atty.with_dimension_constant_scores().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(16);
        for _ in 0..10 {
            let src: Vec<usize> = (0..rng.random_range(1..5)).map(|_| rng.random_range(3..8)).collect();
            let mut tgt: Vec<usize> = (0..rng.random_range(1..4)).map(|_| rng.random_range(3..8)).collect();
            tgt.push(EOS_ID);
            let a = atty.sentence_log_likelihood(&src, &tgt).unwrap();
            let b = atty2d.sentence_log_likelihood(&src, &tgt).unwrap();
            assert!((a - b).abs() < 1e-9, "log-likelihoods diverge: {a} vs {b}");
        }
    }

    #[test]
    fn trained_init_states_add_parameters() {
        let mut config = tiny_config(Variant::Att, false, 17);
        config.trained_init_states = true;
        let model = Model::new(config).unwrap();
        assert!(model.params.get("enc.fwd.h0").is_ok());
        assert!(model.params.get("enc.bwd.c0").is_ok());
        // And they round-trip through the checkpoint.
        let reloaded = Model::from_bytes(&model.to_bytes()).unwrap();
        assert_eq!(model, reloaded);
    }

    #[test]
    fn fingerprint_tracks_parameters() {
        let a = Model::new(tiny_config(Variant::Att, false, 18)).unwrap();
        let b = Model::new(tiny_config(Variant::Att, false, 19)).unwrap();
        assert_ne!(a.fingerprint(), b.fingerprint());
        assert_eq!(a.fingerprint(), a.clone().fingerprint());
    }
}

//! Miniature pre-LayerNorm encoder-decoder transformer.
//!
//! The encoder reads the prompt followed by the flattened persona; its final
//! layer, mean-pooled over non-PAD positions, is the persona embedding. The
//! decoder is run teacher-forced over `BOS + offer` with causal self-attention
//! and cross-attention to the encoder states; its final layer, mean-pooled the
//! same way, is the offer embedding. The same decoder states feed the LM head
//! for the generation loss and for greedy decoding.

pub mod checkpoint;
pub mod tokenizer;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{Persona, TrainingExample};
use crate::tensor::{AttentionSpec, Binder, Graph, ParamStore, Span, Tensor, TensorError, Var};
use tokenizer::{Tokenizer, BOS, EOS, PAD};

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CHECKPOINT_VERSION};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("empty {0} sequence")]
    EmptyInput(&'static str),
    #[error("{what} sequence of length {len} exceeds max_len {max}")]
    TooLong {
        what: &'static str,
        len: usize,
        max: usize,
    },
    #[error("token id {id} outside vocabulary of {vocab}")]
    BadToken { id: u32, vocab: usize },
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("checkpoint config does not match model: {0}")]
    ConfigMismatch(String),
    #[error("checkpoint is missing parameter `{0}`")]
    MissingParameter(String),
    #[error("checkpoint has unexpected parameter `{0}`")]
    UnexpectedParameter(String),
    #[error("parameter `{name}` has shape {found:?}, expected {expected:?}")]
    ParameterShape {
        name: String,
        found: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Prompt prepended to every persona on the encoder side.
pub const DEFAULT_PROMPT: &str = "generate offer :";

/// Words seen fewer times than this map to UNK (persona names, for instance).
pub const MIN_TOKEN_COUNT: usize = 2;

/// Texts the vocabulary is built from: the prompt, every persona and every offer.
pub fn corpus_texts(examples: &[TrainingExample]) -> Vec<String> {
    let mut out = vec![DEFAULT_PROMPT.to_string()];
    for ex in examples {
        out.push(ex.persona.to_model_text());
        out.extend(
            ex.accepted
                .iter()
                .chain(&ex.rejected)
                .map(|o| o.text.clone()),
        );
    }
    out
}

pub fn build_tokenizer(examples: &[TrainingExample], max_len: usize) -> Tokenizer {
    let texts = corpus_texts(examples);
    Tokenizer::build(texts.iter().map(String::as_str), MIN_TOKEN_COUNT, max_len)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_enc_layers: usize,
    pub n_dec_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub seed: u64,
}

impl ModelConfig {
    pub fn new(vocab_size: usize) -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_enc_layers: 2,
            n_dec_layers: 2,
            d_ff: 128,
            vocab_size,
            max_len: 128,
            seed: 0,
        }
    }

    /// Equal in everything but the initialization seed.
    pub fn same_architecture(&self, other: &Self) -> bool {
        Self {
            seed: 0,
            ..self.clone()
        } == Self {
            seed: 0,
            ..other.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_heads,
            self.n_enc_layers,
            self.n_dec_layers,
            self.d_ff,
            self.vocab_size,
            self.max_len,
        ];
        if dims.contains(&0) {
            return Err(ModelError::BadConfig(
                "all dimensions must be positive".into(),
            ));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::BadConfig(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

const LN_EPS: f64 = 1e-5;
const INIT_STD: f64 = 0.02;

#[derive(Clone, Copy, Debug)]
struct Norm {
    gain: usize,
    bias: usize,
}

#[derive(Clone, Copy, Debug)]
struct Attn {
    w_q: usize,
    w_k: usize,
    w_v: usize,
    w_o: usize,
}

#[derive(Clone, Copy, Debug)]
struct Ffn {
    w_in: usize,
    b_in: usize,
    w_out: usize,
    b_out: usize,
}

#[derive(Clone, Debug)]
struct EncLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct DecLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ffn: Norm,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
struct Layout {
    embedding: usize,
    enc_pos: usize,
    dec_pos: usize,
    enc: Vec<EncLayer>,
    enc_norm: Norm,
    dec: Vec<DecLayer>,
    dec_norm: Norm,
    lm_head: usize,
}

struct Init<'a> {
    store: &'a mut ParamStore,
    rng: ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn gaussian(&mut self, name: &str, shape: &[usize]) -> usize {
        let n = shape.iter().product();
        let data = (0..n).map(|_| self.normal.sample(&mut self.rng)).collect();
        self.add(
            name,
            Tensor::new(shape.to_vec(), data).expect("positive dims"),
        )
    }

    fn fill(&mut self, name: &str, len: usize, v: f64) -> usize {
        self.add(name, Tensor::vector(vec![v; len]))
    }

    fn add(&mut self, name: &str, t: Tensor) -> usize {
        self.store.insert(name, t).expect("layout names are unique")
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gain: self.fill(&format!("{prefix}.gain"), d, 1.0),
            bias: self.fill(&format!("{prefix}.bias"), d, 0.0),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            w_q: self.gaussian(&format!("{prefix}.w_q"), &[d, d]),
            w_k: self.gaussian(&format!("{prefix}.w_k"), &[d, d]),
            w_v: self.gaussian(&format!("{prefix}.w_v"), &[d, d]),
            w_o: self.gaussian(&format!("{prefix}.w_o"), &[d, d]),
        }
    }

    fn ffn(&mut self, prefix: &str, d: usize, d_ff: usize) -> Ffn {
        Ffn {
            w_in: self.gaussian(&format!("{prefix}.w_in"), &[d, d_ff]),
            b_in: self.fill(&format!("{prefix}.b_in"), d_ff, 0.0),
            w_out: self.gaussian(&format!("{prefix}.w_out"), &[d_ff, d]),
            b_out: self.fill(&format!("{prefix}.b_out"), d, 0.0),
        }
    }
}

/// Encoder output for a batch; sequences are packed back to back without padding.
#[derive(Clone, Debug)]
pub struct Encoded {
    /// `[total tokens, d_model]` final-layer states.
    pub states: Var,
    pub spans: Vec<Span>,
}

/// Decoder output for a batch of offers, packed like [`Encoded`].
#[derive(Clone, Debug)]
pub struct Decoded {
    pub states: Var,
    pub spans: Vec<Span>,
}

#[derive(Clone, Debug)]
pub struct Seq2Seq {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore,
    layout: Layout,
}

impl Seq2Seq {
    /// Freshly initialized model (Gaussian, std 0.02, seeded by `config.seed`).
    pub fn new(config: ModelConfig, tokenizer: Tokenizer) -> Result<Self> {
        config.validate()?;
        if tokenizer.vocab_size() != config.vocab_size {
            return Err(ModelError::BadConfig(format!(
                "tokenizer has {} tokens, config says {}",
                tokenizer.vocab_size(),
                config.vocab_size
            )));
        }
        let mut store = ParamStore::new();
        let (d, v, ff) = (config.d_model, config.vocab_size, config.d_ff);
        let mut init = Init {
            store: &mut store,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let embedding = init.gaussian("shared.embedding", &[v, d]);
        let enc_pos = init.gaussian("encoder.position", &[config.max_len, d]);
        let enc = (0..config.n_enc_layers)
            .map(|i| {
                let p = format!("encoder.layer{i}");
                EncLayer {
                    ln_attn: init.norm(&format!("{p}.ln_attn"), d),
                    attn: init.attn(&format!("{p}.attn"), d),
                    ln_ffn: init.norm(&format!("{p}.ln_ffn"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, ff),
                }
            })
            .collect();
        let enc_norm = init.norm("encoder.final_ln", d);
        let dec_pos = init.gaussian("decoder.position", &[config.max_len, d]);
        let dec = (0..config.n_dec_layers)
            .map(|i| {
                let p = format!("decoder.layer{i}");
                DecLayer {
                    ln_self: init.norm(&format!("{p}.ln_self"), d),
                    self_attn: init.attn(&format!("{p}.self_attn"), d),
                    ln_cross: init.norm(&format!("{p}.ln_cross"), d),
                    cross_attn: init.attn(&format!("{p}.cross_attn"), d),
                    ln_ffn: init.norm(&format!("{p}.ln_ffn"), d),
                    ffn: init.ffn(&format!("{p}.ffn"), d, ff),
                }
            })
            .collect();
        let dec_norm = init.norm("decoder.final_ln", d);
        let lm_head = init.gaussian("lm_head.weight", &[d, v]);
        let layout = Layout {
            embedding,
            enc_pos,
            dec_pos,
            enc,
            enc_norm,
            dec,
            dec_norm,
            lm_head,
        };
        Ok(Self {
            config,
            tokenizer,
            params: store,
            layout,
        })
    }

    /// Encoder input ids for a persona: prompt followed by the flattened record.
    pub fn persona_input(&self, persona: &Persona) -> Vec<u32> {
        self.tokenizer
            .encode(&format!("{DEFAULT_PROMPT} {}", persona.to_model_text()))
    }

    pub fn offer_ids(&self, text: &str) -> Vec<u32> {
        let mut ids = self.tokenizer.encode(text);
        ids.truncate(self.config.max_len - 1);
        ids
    }

    fn check_ids(&self, what: &'static str, ids: &[u32], max: usize) -> Result<()> {
        if ids.is_empty() {
            return Err(ModelError::EmptyInput(what));
        }
        if ids.len() > max {
            return Err(ModelError::TooLong {
                what,
                len: ids.len(),
                max,
            });
        }
        if let Some(&id) = ids.iter().find(|&&i| i as usize >= self.config.vocab_size) {
            return Err(ModelError::BadToken {
                id,
                vocab: self.config.vocab_size,
            });
        }
        Ok(())
    }

    fn p(&self, g: &mut Graph, b: &mut Binder, id: usize) -> Var {
        b.get(g, &self.params, id)
    }

    fn layer_norm(&self, g: &mut Graph, b: &mut Binder, x: Var, n: Norm) -> Result<Var> {
        let gain = self.p(g, b, n.gain);
        let bias = self.p(g, b, n.bias);
        Ok(g.layer_norm(x, gain, bias, LN_EPS)?)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        a: Attn,
        x: Var,
        kv: Var,
        spec: AttentionSpec,
    ) -> Result<Var> {
        let w_q = self.p(g, b, a.w_q);
        let w_k = self.p(g, b, a.w_k);
        let w_v = self.p(g, b, a.w_v);
        let w_o = self.p(g, b, a.w_o);
        let q = g.matmul(x, w_q)?;
        let k = g.matmul(kv, w_k)?;
        let v = g.matmul(kv, w_v)?;
        let o = g.attention(q, k, v, spec)?;
        Ok(g.matmul(o, w_o)?)
    }

    fn ffn(&self, g: &mut Graph, b: &mut Binder, f: Ffn, x: Var) -> Result<Var> {
        let w_in = self.p(g, b, f.w_in);
        let b_in = self.p(g, b, f.b_in);
        let w_out = self.p(g, b, f.w_out);
        let b_out = self.p(g, b, f.b_out);
        let h = g.matmul(x, w_in)?;
        let h = g.add(h, b_in)?;
        let h = g.relu(h);
        let h = g.matmul(h, w_out)?;
        Ok(g.add(h, b_out)?)
    }

    /// Token plus position embeddings for packed sequences.
    fn embed(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        pos_table: usize,
        seqs: &[&[u32]],
    ) -> Result<Var> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for s in seqs {
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
        }
        let table = self.p(g, b, self.layout.embedding);
        let tok = g.gather(table, &ids)?;
        let pos_table = self.p(g, b, pos_table);
        let p = g.gather(pos_table, &pos)?;
        Ok(g.add(tok, p)?)
    }

    /// Run the encoder on a batch of (unpadded) encoder inputs.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        inputs: &[Vec<u32>],
    ) -> Result<Encoded> {
        for s in inputs {
            self.check_ids("persona", s, self.config.max_len)?;
        }
        if inputs.is_empty() {
            return Err(ModelError::EmptyInput("persona batch"));
        }
        let lens: Vec<usize> = inputs.iter().map(Vec::len).collect();
        let spans = Span::packed(&lens);
        let seqs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let mut x = self.embed(g, b, self.layout.enc_pos, &seqs)?;
        let spec = AttentionSpec {
            n_heads: self.config.n_heads,
            q_spans: spans.clone(),
            kv_spans: spans.clone(),
            kv_group: (0..inputs.len()).collect(),
            causal: false,
        };
        for layer in &self.layout.enc {
            let h = self.layer_norm(g, b, x, layer.ln_attn)?;
            let a = self.attention(g, b, layer.attn, h, h, spec.clone())?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, b, x, layer.ln_ffn)?;
            let f = self.ffn(g, b, layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let states = self.layer_norm(g, b, x, self.layout.enc_norm)?;
        Ok(Encoded { states, spans })
    }

    /// Run the decoder teacher-forced over `inputs`, each `(ids, persona index)`.
    /// `ids` are decoder inputs, i.e. already starting with BOS.
    pub fn decode_batch(
        &self,
        g: &mut Graph,
        b: &mut Binder,
        enc: &Encoded,
        inputs: &[(Vec<u32>, usize)],
    ) -> Result<Decoded> {
        if inputs.is_empty() {
            return Err(ModelError::EmptyInput("offer batch"));
        }
        for (s, p) in inputs {
            self.check_ids("offer", s, self.config.max_len)?;
            if *p >= enc.spans.len() {
                return Err(ModelError::BadConfig(format!(
                    "persona index {p} out of range"
                )));
            }
        }
        let lens: Vec<usize> = inputs.iter().map(|(s, _)| s.len()).collect();
        let spans = Span::packed(&lens);
        let seqs: Vec<&[u32]> = inputs.iter().map(|(s, _)| s.as_slice()).collect();
        let mut x = self.embed(g, b, self.layout.dec_pos, &seqs)?;
        let self_spec = AttentionSpec {
            n_heads: self.config.n_heads,
            q_spans: spans.clone(),
            kv_spans: spans.clone(),
            kv_group: (0..inputs.len()).collect(),
            causal: true,
        };
        let cross_spec = AttentionSpec {
            n_heads: self.config.n_heads,
            q_spans: spans.clone(),
            kv_spans: enc.spans.clone(),
            kv_group: inputs.iter().map(|(_, p)| *p).collect(),
            causal: false,
        };
        for layer in &self.layout.dec {
            let h = self.layer_norm(g, b, x, layer.ln_self)?;
            let a = self.attention(g, b, layer.self_attn, h, h, self_spec.clone())?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, b, x, layer.ln_cross)?;
            let a = self.attention(g, b, layer.cross_attn, h, enc.states, cross_spec.clone())?;
            x = g.add(x, a)?;
            let h = self.layer_norm(g, b, x, layer.ln_ffn)?;
            let f = self.ffn(g, b, layer.ffn, h)?;
            x = g.add(x, f)?;
        }
        let states = self.layer_norm(g, b, x, self.layout.dec_norm)?;
        Ok(Decoded { states, spans })
    }

    /// Mean of each span's rows: `[spans, d]`.
    pub fn mean_pool(g: &mut Graph, states: Var, spans: &[Span]) -> Result<Var> {
        let rows = g.shape(states)[0];
        let mut w = vec![0.0; spans.len() * rows];
        for (i, sp) in spans.iter().enumerate() {
            w[i * rows + sp.start..i * rows + sp.end()].fill(1.0 / sp.len as f64);
        }
        let pool = g.constant(Tensor::matrix(spans.len(), rows, w)?);
        Ok(g.matmul(pool, states)?)
    }

    /// Vocabulary logits for decoder states: `[rows, vocab]`.
    pub fn logits(&self, g: &mut Graph, b: &mut Binder, states: Var) -> Result<Var> {
        let w = self.p(g, b, self.layout.lm_head);
        Ok(g.matmul(states, w)?)
    }

    /// Decoder input (`BOS + offer`) and target (`offer + EOS`) sequences.
    pub fn teacher_forcing_pair(offer: &[u32]) -> (Vec<u32>, Vec<u32>) {
        let mut input = Vec::with_capacity(offer.len() + 1);
        input.push(BOS);
        input.extend_from_slice(offer);
        let mut target = offer.to_vec();
        target.push(EOS);
        (input, target)
    }

    fn strip_pad(ids: &[u32]) -> &[u32] {
        let end = ids.iter().position(|&t| t == PAD).unwrap_or(ids.len());
        &ids[..end]
    }

    /// Mean-pooled final encoder states over non-PAD positions.
    pub fn encode_persona(&self, ids: &[u32]) -> Result<Vec<f64>> {
        let ids = Self::strip_pad(ids);
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let enc = self.encode_batch(&mut g, &mut b, &[ids.to_vec()])?;
        let pooled = Self::mean_pool(&mut g, enc.states, &enc.spans)?;
        Ok(g.value(pooled).data().to_vec())
    }

    /// Final-layer decoder states for `BOS + offer`, one row per position.
    pub fn decoder_states(&self, persona: &[u32], offer: &[u32]) -> Result<Vec<Vec<f64>>> {
        let persona = Self::strip_pad(persona);
        let offer = Self::strip_pad(offer);
        if offer.is_empty() {
            return Err(ModelError::EmptyInput("offer"));
        }
        let mut g = Graph::new();
        let mut b = Binder::frozen(&self.params);
        let enc = self.encode_batch(&mut g, &mut b, &[persona.to_vec()])?;
        let (input, _) = Self::teacher_forcing_pair(offer);
        let dec = self.decode_batch(&mut g, &mut b, &enc, &[(input, 0)])?;
        let d = self.config.d_model;
        Ok(g.value(dec.states)
            .data()
            .chunks(d)
            .map(<[f64]>::to_vec)
            .collect())
    }

    /// Mean-pooled final decoder states of the teacher-forced offer, conditioned on the persona.
    pub fn embed_offer(&self, persona: &[u32], offer: &[u32]) -> Result<Vec<f64>> {
        let states = self.decoder_states(persona, offer)?;
        let n = states.len() as f64;
        let mut out = vec![0.0; self.config.d_model];
        for row in &states {
            out.iter_mut().zip(row).for_each(|(o, x)| *o += x);
        }
        out.iter_mut().for_each(|o| *o /= n);
        Ok(out)
    }

    /// Greedy decoding from BOS; the encoder reads `prompt ++ persona`.
    pub fn generate(&self, persona: &[u32], prompt: &[u32], max_new: usize) -> Result<Vec<u32>> {
        if max_new == 0 {
            return Err(ModelError::BadConfig("max_new must be at least 1".into()));
        }
        let mut input: Vec<u32> = prompt.to_vec();
        input.extend_from_slice(Self::strip_pad(persona));
        self.generate_from_input(&input, max_new)
    }

    /// Greedy decoding for a ready-made encoder input.
    pub fn generate_from_input(&self, encoder_input: &[u32], max_new: usize) -> Result<Vec<u32>> {
        let (states, spans) = {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&self.params);
            let enc = self.encode_batch(&mut g, &mut b, &[encoder_input.to_vec()])?;
            (g.value(enc.states).clone(), enc.spans)
        };
        let mut dec_in = vec![BOS];
        let mut out = Vec::new();
        let budget = max_new.min(self.config.max_len - 1);
        while out.len() < budget {
            let mut g = Graph::new();
            let mut b = Binder::frozen(&self.params);
            let enc = Encoded {
                states: g.constant(states.clone()),
                spans: spans.clone(),
            };
            let dec = self.decode_batch(&mut g, &mut b, &enc, &[(dec_in.clone(), 0)])?;
            let last = g.slice(dec.states, 0, dec_in.len() - 1, dec_in.len())?;
            let logits = self.logits(&mut g, &mut b, last)?;
            let next = argmax(g.value(logits).data()) as u32;
            out.push(next);
            if next == EOS {
                break;
            }
            dec_in.push(next);
        }
        Ok(out)
    }

    /// Names and shapes of every parameter, in layout order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        self.params
            .iter()
            .map(|p| (p.name.clone(), p.tensor.shape().to_vec()))
            .collect()
    }
}

/// Index of the first maximum.
fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

//! The attribute-injected BiLSTM-attention classifier.

use crate::attribute::{
    AttributeEmbeddings, CachedModulators, GateCache, Generator, GeneratorSlot, Modulator,
    SiteModulators,
};
use crate::config::{InjectionSite, ModelConfig, RepresentationKind};
use crate::error::{Error, Result};
use crate::layers::{
    argmax, AttentionLayer, Classifier, Dropout, EmbeddingLayer, Encoder, LstmDirection,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::autograd::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// Bound for the random word-vector initialization.
pub const WORD_INIT: f64 = 0.1;

/// Values recorded by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct Forward {
    pub words: Var,
    pub encodings: Var,
    pub attention: Var,
    pub document: Var,
    pub logits: Var,
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    params: ParamStore,
    pub embedding: EmbeddingLayer,
    pub encoder: Encoder,
    pub attention: AttentionLayer,
    pub classifier: Classifier,
    pub attributes: Option<AttributeEmbeddings>,
    pub generators: Vec<Generator>,
}

fn glorot_bound(rows: usize, cols: usize) -> f64 {
    (6.0 / (rows + cols) as f64).sqrt()
}

impl Model {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::init(config, &mut rng)
    }

    /// Random initialization: Glorot-uniform weights, zero biases, word
    /// vectors uniform in `±WORD_INIT`, attribute tables uniform in `±0.01`.
    pub fn init<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let replaced = |site: InjectionSite| {
            config
                .attributes
                .as_ref()
                .is_some_and(|a| a.kind == RepresentationKind::Matrix && a.has_site(site))
        };
        let weight = |params: &mut ParamStore, name: &str, site: InjectionSite, rng: &mut R| {
            if replaced(site) {
                return None;
            }
            let (r, c) = config.site_dims(site);
            Some(params.add(name, Tensor::uniform(&[r, c], glorot_bound(r, c), rng), true))
        };
        let hd = config.direction_dim();

        let word_table = params.add(
            "word_table",
            Tensor::uniform(&[config.vocab_size, config.word_dim], WORD_INIT, rng),
            false,
        );
        let emb_w = weight(&mut params, "emb.weight", InjectionSite::Embedding, rng);
        let emb_b = params.add("emb.bias", Tensor::zeros(&[config.embed_dim]), false);
        let embedding = EmbeddingLayer {
            word_table,
            weight: emb_w,
            bias: emb_b,
        };

        let direction = |params: &mut ParamStore, tag: &str, rng: &mut R| LstmDirection {
            weight: weight(params, &format!("enc.{tag}.weight"), InjectionSite::Encoder, rng),
            bias: params.add(format!("enc.{tag}.bias"), Tensor::zeros(&[4 * hd]), false),
            hidden: hd,
        };
        let forward = direction(&mut params, "fwd", rng);
        let backward = direction(&mut params, "bwd", rng);
        let encoder = Encoder { forward, backward };

        let att_w = weight(&mut params, "att.weight", InjectionSite::Attention, rng);
        let att_b = params.add("att.bias", Tensor::zeros(&[config.attention_dim]), false);
        let att_v = params.add(
            "att.v",
            Tensor::uniform(&[config.attention_dim], glorot_bound(config.attention_dim, 1), rng),
            false,
        );
        let attention = AttentionLayer {
            weight: att_w,
            bias: att_b,
            context: att_v,
        };

        let cls_w = weight(&mut params, "cls.weight", InjectionSite::Classifier, rng);
        let cls_b = params.add("cls.bias", Tensor::zeros(&[config.num_classes]), false);
        let classifier = Classifier {
            weight: cls_w,
            bias: cls_b,
        };

        let mut attributes = None;
        let mut generators = Vec::new();
        if let Some(a) = &config.attributes {
            attributes = Some(AttributeEmbeddings::register(&mut params, &config, rng)?);
            for &site in &a.sites {
                for &slot in GeneratorSlot::for_site(site) {
                    generators.push(Generator::register(&mut params, slot, &config, rng)?);
                }
            }
        }

        Ok(Self {
            config,
            params,
            embedding,
            encoder,
            attention,
            classifier,
            attributes,
            generators,
        })
    }

    /// Rebuilds a model around stored parameters (e.g. from a checkpoint).
    /// Names and shapes must match what `config` registers.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        let mut shell = Self::new(config, 0)?;
        if params.len() != shell.params.len() {
            return Err(Error::data(format!(
                "expected {} parameters, found {}",
                shell.params.len(),
                params.len()
            )));
        }
        for id in shell.params.ids().collect::<Vec<_>>() {
            let name = shell.params.name(id).to_string();
            let stored = params
                .by_name(&name)
                .ok_or_else(|| Error::data(format!("missing parameter `{name}`")))?;
            let target = shell.params.get_mut(id);
            if stored.shape() != target.shape() {
                return Err(Error::shape("checkpoint parameter", target.shape(), stored.shape()));
            }
            target.data_mut().copy_from_slice(stored.data());
        }
        Ok(shell)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn replace_params(&mut self, params: ParamStore) {
        self.params = params;
    }

    /// A tape reading this model's parameters.
    pub fn tape(&self) -> Tape<'_> {
        Tape::with_params(&self.params)
    }

    /// Replaces the word-vector table, e.g. with pretrained vectors.
    pub fn set_word_vectors(&mut self, table: Tensor) -> Result<()> {
        let id = self.embedding.word_table;
        if table.shape() != self.params.get(id).shape() {
            return Err(Error::shape("word vectors", self.params.get(id).shape(), table.shape()));
        }
        *self.params.get_mut(id) = table;
        Ok(())
    }

    /// Modulators for every configured generator on this example.
    pub fn modulators(&self, tape: &mut Tape, user: usize, product: usize) -> Result<SiteModulators> {
        let mut mods = SiteModulators::default();
        let Some(attrs) = &self.attributes else {
            return Ok(mods);
        };
        let up = attrs.lookup(tape, user, product)?;
        for g in &self.generators {
            mods.set(g.slot, g.modulator(tape, up)?);
        }
        Ok(mods)
    }

    /// The modulators bound to one site's affine map (two for the encoder).
    pub fn apply_site(
        &self,
        tape: &mut Tape,
        site: InjectionSite,
        user: usize,
        product: usize,
    ) -> Result<Vec<(GeneratorSlot, Modulator)>> {
        let attrs = self
            .attributes
            .as_ref()
            .filter(|_| self.config.attributes.as_ref().is_some_and(|a| a.has_site(site)))
            .ok_or_else(|| Error::config(format!("site {site} is not configured for injection")))?;
        let up = attrs.lookup(tape, user, product)?;
        self.generators
            .iter()
            .filter(|g| g.slot.site() == site)
            .map(|g| Ok((g.slot, g.modulator(tape, up)?)))
            .collect()
    }

    /// Full forward pass with modulators computed on the tape.
    pub fn forward(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        user: usize,
        product: usize,
        dropout: &mut Option<Dropout>,
    ) -> Result<Forward> {
        let mods = self.modulators(tape, user, product)?;
        self.forward_with(tape, tokens, &mods, dropout)
    }

    /// Forward pass with externally supplied modulators.
    pub fn forward_with(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        mods: &SiteModulators,
        dropout: &mut Option<Dropout>,
    ) -> Result<Forward> {
        let words = self
            .embedding
            .forward(tape, tokens, mods.embedding.as_ref(), dropout)?;
        let encodings = self.encoder.forward(
            tape,
            words,
            [mods.encoder[0].as_ref(), mods.encoder[1].as_ref()],
            dropout,
        )?;
        let mask = vec![true; tokens.len()];
        let (document, attention) = self.attention.forward(
            tape,
            encodings,
            &mask,
            mods.attention.as_ref(),
            dropout,
        )?;
        let logits = self
            .classifier
            .forward(tape, document, mods.classifier.as_ref(), dropout)?;
        Ok(Forward {
            words,
            encodings,
            attention,
            document,
            logits,
        })
    }

    /// Cross-entropy of one labelled example; returns `(loss, logits)`.
    pub fn loss(
        &self,
        tape: &mut Tape,
        tokens: &[usize],
        user: usize,
        product: usize,
        label: usize,
        dropout: &mut Option<Dropout>,
    ) -> Result<(Var, Var)> {
        let out = self.forward(tape, tokens, user, product, dropout)?;
        Ok((tape.cross_entropy(out.logits, label)?, out.logits))
    }

    /// Modulator values for `(user, product)` computed on a scratch tape.
    pub fn compute_modulators(&self, user: usize, product: usize) -> Result<CachedModulators> {
        let kind = self
            .config
            .attributes
            .as_ref()
            .map_or(RepresentationKind::Chim, |a| a.kind);
        let mut tape = self.tape();
        let mods = self.modulators(&mut tape, user, product)?;
        let values = self
            .generators
            .iter()
            .map(|g| {
                let v = match mods.get(g.slot).expect("modulator for every generator") {
                    Modulator::Bias(v) | Modulator::Replace(v) | Modulator::Gate(v) => *v,
                };
                (g.slot, tape.value(v).clone())
            })
            .collect();
        Ok(CachedModulators { kind, values })
    }

    /// Dropout-free logits, reusing per-(user, product) modulators from
    /// `cache` when given.
    pub fn logits(
        &self,
        tokens: &[usize],
        user: usize,
        product: usize,
        cache: Option<&GateCache>,
    ) -> Result<Vec<f64>> {
        let mut tape = self.tape();
        let mods = match (cache, self.generators.is_empty()) {
            (Some(cache), false) => {
                let version = self.params.version();
                let cached = match cache.get(user, product, version) {
                    Some(c) => c,
                    None => {
                        let c = Arc::new(self.compute_modulators(user, product)?);
                        cache.insert(user, product, version, c.clone());
                        c
                    }
                };
                cached.bind(&mut tape)
            }
            _ => self.modulators(&mut tape, user, product)?,
        };
        let out = self.forward_with(&mut tape, tokens, &mods, &mut None)?;
        Ok(tape.value(out.logits).data().to_vec())
    }

    pub fn predict(
        &self,
        tokens: &[usize],
        user: usize,
        product: usize,
        cache: Option<&GateCache>,
    ) -> Result<usize> {
        Ok(argmax(&self.logits(tokens, user, product, cache)?))
    }

    /// Largest row norm over max-norm constrained matrices.
    pub fn max_constrained_row_norm(&self) -> f64 {
        self.params.max_constrained_row_norm()
    }
}

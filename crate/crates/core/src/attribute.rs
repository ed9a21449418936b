//! Attribute representations and their injection into affine maps.
//!
//! Every injection site computes `g(W x + b)`. A (user, product) pair
//! modifies that map in one of three ways:
//!
//! * **bias**: `W x + b + W_b [u; p]`
//! * **matrix**: `W' x + b` where `W' = reshape(W_c [u; p] + b_c)` replaces `W`
//! * **chim**: `(W' ∘ W) x + b` where `W' = σ(tile(reshape(W_c [u; p] + b_c)))`
//!
//! The chim generator produces a `(d1/c1) × (d2/c2)` chunk matrix, so it
//! is `c1·c2` times smaller than the matrix generator.

use crate::autograd::{Tape, TileLayout, Var};
use crate::config::{InjectionSite, ModelConfig, RepresentationKind};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use parking_lot::RwLock;
use rand::Rng;
use serde::Serialize;
use std::collections::HashMap;
use std::sync::Arc;

/// A per-example modification of one affine map, bound to the tape.
#[derive(Debug, Clone, Copy)]
pub enum Modulator {
    /// Extra pre-activation bias, shape `[d1]`.
    Bias(Var),
    /// Replacement weight, shape `[d1, d2]`.
    Replace(Var),
    /// Gate in `(0, 1)` multiplied into the weight, shape `[d1, d2]`.
    Gate(Var),
}

/// The weight actually used by an affine map under an optional modulator.
pub fn effective_weight(
    tape: &mut Tape,
    weight: Option<Var>,
    modulator: Option<&Modulator>,
) -> Result<Var> {
    match modulator {
        Some(Modulator::Replace(w)) => Ok(*w),
        Some(Modulator::Gate(g)) => {
            let w = weight.ok_or_else(|| Error::invalid("gate applied to a missing weight"))?;
            tape.mul(*g, w)
        }
        None | Some(Modulator::Bias(_)) => {
            weight.ok_or_else(|| Error::invalid("weight replaced but no replacement supplied"))
        }
    }
}

/// The additive pre-activation term of a bias modulator, if any.
pub fn extra_bias(modulator: Option<&Modulator>) -> Option<Var> {
    match modulator {
        Some(Modulator::Bias(b)) => Some(*b),
        _ => None,
    }
}

/// `W_b [u; p]`, equal to `W_u u + W_p p` with `W_b = [W_u W_p]`.
pub fn bias_vector(tape: &mut Tape, weight: Var, attrs: Var) -> Result<Var> {
    tape.matmul(weight, attrs)
}

/// `reshape(W_c [u; p] + b_c, d1 × d2)`.
pub fn matrix_weight(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    attrs: Var,
    d1: usize,
    d2: usize,
) -> Result<Var> {
    let flat = tape.matmul(weight, attrs)?;
    let flat = tape.add(flat, bias)?;
    tape.reshape(flat, &[d1, d2])
}

/// Chunk matrix and its tiled sigmoid gate on the tape.
#[derive(Debug, Clone, Copy)]
pub struct ChimGate {
    /// `(d1/c1) × (d2/c2)` pre-sigmoid chunk.
    pub chunk: Var,
    /// `d1 × d2` gate with entries in `(0, 1)`.
    pub gate: Var,
}

/// Chunk dimensions, checking divisibility.
pub fn chunk_shape(d1: usize, d2: usize, c1: usize, c2: usize) -> Result<(usize, usize)> {
    if c1 == 0 || c2 == 0 || !d1.is_multiple_of(c1) || !d2.is_multiple_of(c2) {
        return Err(Error::config(format!(
            "weight {d1}x{d2} is not divisible by chunk factors {c1}x{c2}"
        )));
    }
    Ok((d1 / c1, d2 / c2))
}

#[allow(clippy::too_many_arguments)]
pub fn chim_gate(
    tape: &mut Tape,
    weight: Var,
    bias: Var,
    attrs: Var,
    (d1, d2): (usize, usize),
    (c1, c2): (usize, usize),
    layout: TileLayout,
) -> Result<ChimGate> {
    let (r, s) = chunk_shape(d1, d2, c1, c2)?;
    let flat = tape.matmul(weight, attrs)?;
    let flat = tape.add(flat, bias)?;
    let chunk = tape.reshape(flat, &[r, s])?;
    let tiled = tape.tile(chunk, c1, c2, layout)?;
    let gate = tape.sigmoid(tiled);
    Ok(ChimGate { chunk, gate })
}

/// Which weight a generator feeds. The encoder has one per direction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GeneratorSlot {
    Embedding,
    EncoderForward,
    EncoderBackward,
    Attention,
    Classifier,
}

impl GeneratorSlot {
    pub fn site(self) -> InjectionSite {
        match self {
            Self::Embedding => InjectionSite::Embedding,
            Self::EncoderForward | Self::EncoderBackward => InjectionSite::Encoder,
            Self::Attention => InjectionSite::Attention,
            Self::Classifier => InjectionSite::Classifier,
        }
    }

    pub fn for_site(site: InjectionSite) -> &'static [GeneratorSlot] {
        match site {
            InjectionSite::Embedding => &[Self::Embedding],
            InjectionSite::Encoder => &[Self::EncoderForward, Self::EncoderBackward],
            InjectionSite::Attention => &[Self::Attention],
            InjectionSite::Classifier => &[Self::Classifier],
        }
    }

    pub fn param_prefix(self) -> &'static str {
        match self {
            Self::Embedding => "gen.embedding",
            Self::EncoderForward => "gen.encoder.fwd",
            Self::EncoderBackward => "gen.encoder.bwd",
            Self::Attention => "gen.attention",
            Self::Classifier => "gen.classifier",
        }
    }
}

/// Parameters that map `[u; p]` to a modulator for one weight.
#[derive(Debug, Clone)]
pub struct Generator {
    pub slot: GeneratorSlot,
    pub kind: RepresentationKind,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub dims: (usize, usize),
    pub chunks: (usize, usize),
    pub layout: TileLayout,
}

fn glorot(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

impl Generator {
    /// Registers generator parameters in `store`.
    ///
    /// Bias generators have no bias of their own. Matrix generators start
    /// with `b_c` holding an ordinary random weight so the replaced map
    /// begins like the base model; chim generators start with `b_c = 0`,
    /// i.e. every gate at 0.5.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        slot: GeneratorSlot,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attrs = config
            .attributes
            .as_ref()
            .ok_or_else(|| Error::config("generator without attribute configuration"))?;
        let site = slot.site();
        let dims = config.site_dims(site);
        let chunks = config.site_chunks(site);
        let k = attrs.concat_dim();
        let prefix = slot.param_prefix();
        let (weight, bias) = match attrs.kind {
            RepresentationKind::Bias => {
                let w = Tensor::uniform(&[dims.0, k], glorot(k, dims.0), rng);
                (store.add(format!("{prefix}.weight"), w, true), None)
            }
            RepresentationKind::Matrix => {
                let n = dims.0 * dims.1;
                let w = Tensor::uniform(&[n, k], glorot(k, n), rng);
                let b = Tensor::uniform(&[n], glorot(dims.1, dims.0), rng);
                (
                    store.add(format!("{prefix}.weight"), w, true),
                    Some(store.add(format!("{prefix}.bias"), b, false)),
                )
            }
            RepresentationKind::Chim => {
                let (r, s) = chunk_shape(dims.0, dims.1, chunks.0, chunks.1)?;
                let w = Tensor::uniform(&[r * s, k], glorot(k, r * s), rng);
                let b = Tensor::zeros(&[r * s]);
                (
                    store.add(format!("{prefix}.weight"), w, true),
                    Some(store.add(format!("{prefix}.bias"), b, false)),
                )
            }
        };
        Ok(Self {
            slot,
            kind: attrs.kind,
            weight,
            bias,
            dims,
            chunks,
            layout: attrs.layout,
        })
    }

    /// Builds this generator's modulator from the concatenated `[u; p]`.
    pub fn modulator(&self, tape: &mut Tape, attrs: Var) -> Result<Modulator> {
        let w = tape.param(self.weight);
        match self.kind {
            RepresentationKind::Bias => Ok(Modulator::Bias(bias_vector(tape, w, attrs)?)),
            RepresentationKind::Matrix => {
                let b = tape.param(self.bias.expect("matrix generator bias"));
                let m = matrix_weight(tape, w, b, attrs, self.dims.0, self.dims.1)?;
                Ok(Modulator::Replace(m))
            }
            RepresentationKind::Chim => {
                let b = tape.param(self.bias.expect("chim generator bias"));
                let g = chim_gate(tape, w, b, attrs, self.dims, self.chunks, self.layout)?;
                Ok(Modulator::Gate(g.gate))
            }
        }
    }
}

/// User and product embedding tables; row 0 of each is the unknown entity.
#[derive(Debug, Clone, Copy)]
pub struct AttributeEmbeddings {
    pub users: ParamId,
    pub products: ParamId,
}

impl AttributeEmbeddings {
    /// Tables initialized uniformly in `[-0.01, 0.01]`.
    pub fn register<R: Rng + ?Sized>(
        store: &mut ParamStore,
        config: &ModelConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let attrs = config
            .attributes
            .as_ref()
            .ok_or_else(|| Error::config("attribute tables without attribute configuration"))?;
        let users = Tensor::uniform(&[config.num_users, attrs.user_dim], 0.01, rng);
        let products = Tensor::uniform(&[config.num_products, attrs.product_dim], 0.01, rng);
        Ok(Self {
            users: store.add("attr.user", users, false),
            products: store.add("attr.product", products, false),
        })
    }

    /// `[u; p]` for the given ids; out-of-range ids fall back to row 0.
    pub fn lookup(&self, tape: &mut Tape, user: usize, product: usize) -> Result<Var> {
        let ut = tape.param(self.users);
        let pt = tape.param(self.products);
        let user = if user < tape.value(ut).rows() { user } else { 0 };
        let product = if product < tape.value(pt).rows() { product } else { 0 };
        let u = tape.row(ut, user)?;
        let p = tape.row(pt, product)?;
        tape.concat(&[u, p])
    }
}

/// Modulators for every generator slot of one example.
#[derive(Debug, Clone, Copy, Default)]
pub struct SiteModulators {
    pub embedding: Option<Modulator>,
    pub encoder: [Option<Modulator>; 2],
    pub attention: Option<Modulator>,
    pub classifier: Option<Modulator>,
}

impl SiteModulators {
    pub fn set(&mut self, slot: GeneratorSlot, m: Modulator) {
        match slot {
            GeneratorSlot::Embedding => self.embedding = Some(m),
            GeneratorSlot::EncoderForward => self.encoder[0] = Some(m),
            GeneratorSlot::EncoderBackward => self.encoder[1] = Some(m),
            GeneratorSlot::Attention => self.attention = Some(m),
            GeneratorSlot::Classifier => self.classifier = Some(m),
        }
    }

    pub fn get(&self, slot: GeneratorSlot) -> Option<&Modulator> {
        match slot {
            GeneratorSlot::Embedding => self.embedding.as_ref(),
            GeneratorSlot::EncoderForward => self.encoder[0].as_ref(),
            GeneratorSlot::EncoderBackward => self.encoder[1].as_ref(),
            GeneratorSlot::Attention => self.attention.as_ref(),
            GeneratorSlot::Classifier => self.classifier.as_ref(),
        }
    }
}

/// Modulator values computed outside a tape, reusable across documents.
#[derive(Debug, Clone)]
pub struct CachedModulators {
    pub kind: RepresentationKind,
    pub values: Vec<(GeneratorSlot, Tensor)>,
}

impl CachedModulators {
    /// Places the cached values on `tape` as constants.
    pub fn bind(&self, tape: &mut Tape) -> SiteModulators {
        let mut mods = SiteModulators::default();
        for (slot, t) in &self.values {
            let v = tape.input(t.clone());
            let m = match self.kind {
                RepresentationKind::Bias => Modulator::Bias(v),
                RepresentationKind::Matrix => Modulator::Replace(v),
                RepresentationKind::Chim => Modulator::Gate(v),
            };
            mods.set(*slot, m);
        }
        mods
    }
}

/// Per-(user, product) modulator cache keyed on the parameter version.
///
/// Reads are concurrent; an insert for a newer version drops every entry of
/// older versions.
#[derive(Debug, Default)]
pub struct GateCache {
    inner: RwLock<CacheInner>,
}

#[derive(Debug, Default)]
struct CacheInner {
    version: u64,
    entries: HashMap<(usize, usize), Arc<CachedModulators>>,
}

impl GateCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self, user: usize, product: usize, version: u64) -> Option<Arc<CachedModulators>> {
        let inner = self.inner.read();
        if inner.version != version {
            return None;
        }
        inner.entries.get(&(user, product)).cloned()
    }

    pub fn insert(&self, user: usize, product: usize, version: u64, value: Arc<CachedModulators>) {
        let mut inner = self.inner.write();
        if inner.version != version {
            if version < inner.version {
                return;
            }
            inner.version = version;
            inner.entries.clear();
        }
        inner.entries.insert((user, product), value);
    }

    pub fn len(&self) -> usize {
        self.inner.read().entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named parameter counts for a configuration, computed in closed form.
#[derive(Debug, Clone, Serialize)]
pub struct ParamCounts {
    pub entries: Vec<(String, usize)>,
    pub total: usize,
    pub attribute_total: usize,
    /// Per configured site: (site, matrix generator size, chim generator size).
    pub generator_comparison: Vec<(InjectionSite, usize, usize)>,
}

impl ParamCounts {
    pub fn get(&self, name: &str) -> Option<usize> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, c)| *c)
    }

    /// Matrix-to-chim generator size ratio at a site.
    pub fn matrix_chim_ratio(&self, site: InjectionSite) -> Option<f64> {
        self.generator_comparison
            .iter()
            .find(|(s, _, _)| *s == site)
            .map(|(_, m, c)| *m as f64 / *c as f64)
    }
}

/// Generator parameter count for one weight of shape `d1 × d2`.
pub fn generator_size(
    kind: RepresentationKind,
    attr_dim: usize,
    (d1, d2): (usize, usize),
    (c1, c2): (usize, usize),
) -> usize {
    match kind {
        RepresentationKind::Bias => attr_dim * d1,
        RepresentationKind::Matrix => (attr_dim + 1) * d1 * d2,
        RepresentationKind::Chim => (attr_dim + 1) * (d1 * d2) / (c1 * c2),
    }
}

/// Exact parameter counts per component.
///
/// The matrix generator is one shared `W_c` over `[u; p]`, so its size is
/// `(d_u + d_p + 1)·d1·d2` and does not grow with the number of users or
/// products.
pub fn count_parameters(config: &ModelConfig) -> ParamCounts {
    let hd = config.direction_dim();
    let replaced = |site: InjectionSite| {
        config
            .attributes
            .as_ref()
            .is_some_and(|a| a.kind == RepresentationKind::Matrix && a.has_site(site))
    };
    let weight = |site: InjectionSite| {
        let (r, c) = config.site_dims(site);
        if replaced(site) {
            0
        } else {
            r * c
        }
    };
    let mut entries = vec![
        ("word_table".to_string(), config.vocab_size * config.word_dim),
        (
            "embedding".to_string(),
            weight(InjectionSite::Embedding) + config.embed_dim,
        ),
        (
            "encoder".to_string(),
            2 * (weight(InjectionSite::Encoder) + 4 * hd),
        ),
        (
            "attention".to_string(),
            weight(InjectionSite::Attention) + 2 * config.attention_dim,
        ),
        (
            "classifier".to_string(),
            weight(InjectionSite::Classifier) + config.num_classes,
        ),
    ];
    let mut attribute_total = 0;
    let mut generator_comparison = Vec::new();
    if let Some(a) = &config.attributes {
        let tables = config.num_users * a.user_dim + config.num_products * a.product_dim;
        entries.push(("attribute_tables".to_string(), tables));
        attribute_total += tables;
        for &site in &a.sites {
            let dims = config.site_dims(site);
            let chunks = config.site_chunks(site);
            let per = generator_size(a.kind, a.concat_dim(), dims, chunks);
            let n = per * GeneratorSlot::for_site(site).len();
            entries.push((format!("generator.{site}"), n));
            attribute_total += n;
            let slots = GeneratorSlot::for_site(site).len();
            generator_comparison.push((
                site,
                slots * generator_size(RepresentationKind::Matrix, a.concat_dim(), dims, chunks),
                slots * generator_size(RepresentationKind::Chim, a.concat_dim(), dims, chunks),
            ));
        }
    }
    let total = entries.iter().map(|(_, c)| c).sum();
    ParamCounts {
        entries,
        total,
        attribute_total,
        generator_comparison,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::sigmoid;
    use crate::config::AttributeConfig;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn bias_vector_cases() {
        let mut t = Tape::new();
        let zero = t.input(Tensor::zeros(&[4]));
        let w = t.input(Tensor::uniform(&[3, 4], 1.0, &mut ChaCha8Rng::seed_from_u64(3)));
        let b = bias_vector(&mut t, w, zero).unwrap();
        assert_eq!(t.value(b).data(), &[0.0; 3]);

        // W_u = I, p = 0 -> u
        let mut wb = Tensor::zeros(&[2, 4]);
        wb.data_mut()[0] = 1.0;
        wb.data_mut()[5] = 1.0;
        let wv = t.input(wb);
        let up = t.input(Tensor::vector(vec![0.7, -0.2, 0.0, 0.0]));
        let b = bias_vector(&mut t, wv, up).unwrap();
        assert_eq!(t.value(b).data(), &[0.7, -0.2]);
    }

    #[test]
    fn bias_vector_matches_separate_user_and_product_maps() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let wu = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let wp = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let u = [0.3, -0.8];
        let p = [1.1, 0.25];
        let mut joint = Tensor::zeros(&[4, 4]);
        for i in 0..4 {
            joint.row_mut(i)[..2].copy_from_slice(wu.row(i));
            joint.row_mut(i)[2..].copy_from_slice(wp.row(i));
        }
        let mut t = Tape::new();
        let w = t.input(joint);
        let up = t.input(Tensor::vector(vec![u[0], u[1], p[0], p[1]]));
        let b = bias_vector(&mut t, w, up).unwrap();
        for i in 0..4 {
            let mut expected = 0.0;
            for j in 0..2 {
                expected += wu.at(i, j) * u[j] + wp.at(i, j) * p[j];
            }
            assert_abs_diff_eq!(t.value(b).data()[i], expected, epsilon = 1e-14);
        }
    }

    #[test]
    fn matrix_weight_identity_and_loop_oracle() {
        let mut t = Tape::new();
        let w = t.input(Tensor::zeros(&[4, 3]));
        let b = t.input(Tensor::vector(vec![1.0, 0.0, 0.0, 1.0]));
        let up = t.input(Tensor::vector(vec![0.4, -0.3, 2.0]));
        let m = matrix_weight(&mut t, w, b, up, 2, 2).unwrap();
        assert_eq!(t.value(m), &Tensor::identity(2));

        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let wc = Tensor::uniform(&[4, 3], 1.0, &mut rng);
        let bc = Tensor::uniform(&[4], 1.0, &mut rng);
        let upv = [0.4, -0.3, 2.0];
        let w = t.input(wc.clone());
        let b = t.input(bc.clone());
        let m = matrix_weight(&mut t, w, b, up, 2, 2).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let k = i * 2 + j;
                let mut v = bc.data()[k];
                for (l, x) in upv.iter().enumerate() {
                    v += wc.at(k, l) * x;
                }
                assert_abs_diff_eq!(t.value(m).at(i, j), v, epsilon = 1e-14);
            }
        }
    }

    #[test]
    fn chim_gate_shapes_and_half_gate() {
        let mut t = Tape::new();
        let w = t.input(Tensor::zeros(&[400, 600]));
        let b = t.input(Tensor::zeros(&[400]));
        let up = t.input(Tensor::filled(&[600], 0.3));
        let g = chim_gate(&mut t, w, b, up, (300, 300), (15, 15), TileLayout::Periodic).unwrap();
        assert_eq!(t.shape(g.chunk), &[20, 20]);
        assert_eq!(t.shape(g.gate), &[300, 300]);
        assert!(t.value(g.gate).data().iter().all(|v| *v == 0.5));
    }

    #[test]
    fn chim_gate_rejects_indivisible_dims() {
        let mut t = Tape::new();
        let w = t.input(Tensor::zeros(&[4, 2]));
        let b = t.input(Tensor::zeros(&[4]));
        let up = t.input(Tensor::zeros(&[2]));
        let err = chim_gate(&mut t, w, b, up, (5, 4), (2, 2), TileLayout::Periodic).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        assert!(err.to_string().contains("5x4"));
    }

    #[test]
    fn gate_is_periodic() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut t = Tape::new();
        let w = t.input(Tensor::uniform(&[4, 4], 2.0, &mut rng));
        let b = t.input(Tensor::uniform(&[4], 2.0, &mut rng));
        let up = t.input(Tensor::uniform(&[4], 2.0, &mut rng));
        let g = chim_gate(&mut t, w, b, up, (6, 12), (3, 6), TileLayout::Periodic).unwrap();
        let gate = t.value(g.gate);
        let chunk = t.value(g.chunk);
        for i in 0..6 {
            for j in 0..12 {
                let v = gate.at(i, j);
                assert!(v > 0.0 && v < 1.0);
                assert_eq!(v, sigmoid(chunk.at(i % 2, j % 2)));
                if i + 2 < 6 {
                    assert_eq!(v, gate.at(i + 2, j));
                }
                if j + 2 < 12 {
                    assert_eq!(v, gate.at(i, j + 2));
                }
            }
        }
    }

    #[test]
    fn closed_form_counts() {
        let attrs = AttributeConfig::new(
            RepresentationKind::Chim,
            &[InjectionSite::Embedding],
            300,
        )
        .with_chunks(15, 15);
        let cfg = ModelConfig::uniform(300, 1000, 5).with_attributes(attrs, 11, 12);
        let counts = count_parameters(&cfg);
        assert_eq!(counts.get("generator.embedding"), Some(601 * 300 * 300 / 225));
        assert_eq!(counts.matrix_chim_ratio(InjectionSite::Embedding), Some(225.0));

        let bias = AttributeConfig::new(RepresentationKind::Bias, &[InjectionSite::Attention], 8);
        let cfg = ModelConfig::uniform(8, 10, 3).with_attributes(bias, 3, 3);
        let counts = count_parameters(&cfg);
        assert_eq!(counts.get("generator.attention"), Some(16 * 8));

        let base = count_parameters(&ModelConfig::uniform(8, 10, 3));
        assert_eq!(base.attribute_total, 0);
    }

    #[test]
    fn counts_match_registered_generators() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for kind in RepresentationKind::ALL {
            let attrs = AttributeConfig::new(kind, &[InjectionSite::Encoder], 4).with_chunks(2, 2);
            let cfg = ModelConfig::uniform(8, 10, 2).with_attributes(attrs, 3, 3);
            let mut store = ParamStore::new();
            for slot in GeneratorSlot::for_site(InjectionSite::Encoder) {
                Generator::register(&mut store, *slot, &cfg, &mut rng).unwrap();
            }
            let counts = count_parameters(&cfg);
            assert_eq!(counts.get("generator.encoder"), Some(store.num_values()), "{kind}");
        }
    }

    #[test]
    fn cache_is_versioned() {
        let cache = GateCache::new();
        let v = Arc::new(CachedModulators {
            kind: RepresentationKind::Chim,
            values: vec![],
        });
        cache.insert(1, 2, 5, v.clone());
        assert!(cache.get(1, 2, 5).is_some());
        assert!(cache.get(1, 2, 6).is_none());
        cache.insert(3, 3, 6, v.clone());
        assert_eq!(cache.len(), 1);
        cache.insert(1, 2, 5, v);
        assert!(cache.get(1, 2, 5).is_none());
    }
}

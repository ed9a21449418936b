//! Scalar-loop reference forward pass shared by the model and acceptance
//! tests.
#![allow(dead_code)]

use chim::autograd::{Tape, TileLayout};
use chim::config::{AttributeConfig, InjectionSite, ModelConfig, RepresentationKind};
use chim::model::Model;
use chim::params::ParamStore;
use chim::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Mat = Vec<Vec<f64>>;

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn mat(params: &ParamStore, name: &str) -> Mat {
    let t = params.by_name(name).unwrap_or_else(|| panic!("no parameter {name}"));
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn vecp(params: &ParamStore, name: &str) -> Vec<f64> {
    params.by_name(name).unwrap().data().to_vec()
}

pub fn matvec(w: &Mat, x: &[f64]) -> Vec<f64> {
    w.iter()
        .map(|row| {
            let mut s = 0.0;
            for j in 0..x.len() {
                s += row[j] * x[j];
            }
            s
        })
        .collect()
}

/// Attribute-dependent weight and extra bias for one generator, computed
/// with loops. `base` is the ordinary weight when it exists.
pub struct Reference<'a> {
    params: &'a ParamStore,
    attrs: Option<&'a AttributeConfig>,
    up: Vec<f64>,
}

impl Reference<'_> {
    fn weight(&self, prefix: &str, site: InjectionSite, base: Option<Mat>, d1: usize, d2: usize) -> (Mat, Vec<f64>) {
        let zero = vec![0.0; d1];
        let Some(a) = self.attrs.filter(|a| a.has_site(site)) else {
            return (base.unwrap(), zero);
        };
        let gw = mat(self.params, &format!("{prefix}.weight"));
        match a.kind {
            RepresentationKind::Bias => (base.unwrap(), matvec(&gw, &self.up)),
            RepresentationKind::Matrix => {
                let gb = vecp(self.params, &format!("{prefix}.bias"));
                let flat: Vec<f64> = matvec(&gw, &self.up).iter().zip(&gb).map(|(a, b)| a + b).collect();
                let w = (0..d1).map(|i| (0..d2).map(|j| flat[i * d2 + j]).collect()).collect();
                (w, zero)
            }
            RepresentationKind::Chim => {
                let c1 = if site == InjectionSite::Classifier { a.classifier_c1 } else { a.c1 };
                let (r, s) = (d1 / c1, d2 / a.c2);
                let gb = vecp(self.params, &format!("{prefix}.bias"));
                let flat: Vec<f64> = matvec(&gw, &self.up).iter().zip(&gb).map(|(a, b)| a + b).collect();
                let base = base.unwrap();
                let mut w = vec![vec![0.0; d2]; d1];
                for i in 0..d1 {
                    for j in 0..d2 {
                        let (si, sj) = match a.layout {
                            TileLayout::Periodic => (i % r, j % s),
                            TileLayout::Block => (i / c1, j / a.c2),
                        };
                        w[i][j] = sigmoid(flat[si * s + sj]) * base[i][j];
                    }
                }
                (w, zero)
            }
        }
    }
}

/// Word encodings, BiLSTM states, attention weights, document vector and
/// logits, all from scalar loops.
pub struct Trace {
    pub words: Mat,
    pub states: Mat,
    pub attention: Vec<f64>,
    pub logits: Vec<f64>,
}

pub fn reference(model: &Model, tokens: &[usize], user: usize, product: usize) -> Trace {
    let p = model.params();
    let cfg = model.config();
    let attrs = cfg.attributes.as_ref();
    let up = match attrs {
        Some(_) => {
            let mut v = mat(p, "attr.user")[user].clone();
            v.extend(mat(p, "attr.product")[product].clone());
            v
        }
        None => vec![],
    };
    let r = Reference { params: p, attrs, up };
    let has = |n: &str| p.by_name(n).is_some();
    let base = |n: &str| has(n).then(|| mat(p, n));

    let table = mat(p, "word_table");
    let (we, be) = r.weight("gen.embedding", InjectionSite::Embedding, base("emb.weight"), cfg.embed_dim, cfg.word_dim);
    let emb_b = vecp(p, "emb.bias");
    let words: Mat = tokens
        .iter()
        .map(|&t| {
            let z = matvec(&we, &table[t]);
            (0..cfg.embed_dim).map(|i| (z[i] + emb_b[i] + be[i]).tanh()).collect()
        })
        .collect();

    let hd = cfg.direction_dim();
    let n = tokens.len();
    let mut states = vec![vec![0.0; 2 * hd]; n];
    for (dir, tag) in ["fwd", "bwd"].iter().enumerate() {
        let (w, extra) = r.weight(
            &format!("gen.encoder.{tag}"),
            InjectionSite::Encoder,
            base(&format!("enc.{tag}.weight")),
            4 * hd,
            cfg.embed_dim + hd,
        );
        let b = vecp(p, &format!("enc.{tag}.bias"));
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        let order: Vec<usize> = if dir == 0 { (0..n).collect() } else { (0..n).rev().collect() };
        for t in order {
            let mut x = words[t].clone();
            x.extend(&h);
            let z: Vec<f64> = matvec(&w, &x).iter().enumerate().map(|(k, v)| v + b[k] + extra[k]).collect();
            for k in 0..hd {
                let g = z[k].tanh();
                let i = sigmoid(z[hd + k]);
                let f = sigmoid(z[2 * hd + k]);
                let o = sigmoid(z[3 * hd + k]);
                c[k] = f * c[k] + i * g;
                h[k] = o * c[k];
            }
            states[t][dir * hd..(dir + 1) * hd].copy_from_slice(&h);
        }
    }

    let (wa, ea) = r.weight("gen.attention", InjectionSite::Attention, base("att.weight"), cfg.attention_dim, 2 * hd);
    let ba = vecp(p, "att.bias");
    let v = vecp(p, "att.v");
    let scores: Vec<f64> = states
        .iter()
        .map(|h| {
            let z = matvec(&wa, h);
            (0..cfg.attention_dim).map(|k| v[k] * (z[k] + ba[k] + ea[k]).tanh()).sum()
        })
        .collect();
    let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| (s - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let attention: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut doc = vec![0.0; 2 * hd];
    for t in 0..n {
        for k in 0..2 * hd {
            doc[k] += attention[t] * states[t][k];
        }
    }

    let (wc, ec) = r.weight("gen.classifier", InjectionSite::Classifier, base("cls.weight"), cfg.num_classes, 2 * hd);
    let bc = vecp(p, "cls.bias");
    let logits = matvec(&wc, &doc).iter().enumerate().map(|(k, z)| z + bc[k] + ec[k]).collect();
    Trace {
        words,
        states,
        attention,
        logits,
    }
}

/// Word and embedding width 4, two hidden units per direction, attention
/// width 2, three classes, three users and products.
pub fn oracle_config(attrs: Option<AttributeConfig>) -> ModelConfig {
    let mut c = ModelConfig {
        vocab_size: 9,
        word_dim: 4,
        embed_dim: 4,
        hidden_dim: 4,
        attention_dim: 2,
        num_classes: 3,
        num_users: 1,
        num_products: 1,
        attributes: None,
    };
    if let Some(a) = attrs {
        c = c.with_attributes(a, 3, 3);
    }
    c
}

/// A model whose every parameter is redrawn from `±0.8` so that no value
/// sits near an initialization special case.
pub fn scrambled(config: ModelConfig, seed: u64) -> Model {
    let mut m = Model::new(config, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for id in m.params().ids().collect::<Vec<_>>() {
        let shape = m.params().get(id).shape().to_vec();
        *m.params_mut().get_mut(id) = Tensor::uniform(&shape, 0.8, &mut rng);
    }
    m
}

pub fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}");
    for (x, y) in a.iter().zip(b) {
        assert!((x - y).abs() <= tol, "{what}: {a:?} vs {b:?}");
    }
}

/// Largest absolute gap between the model's forward pass and the scalar
/// reference over word encodings, encoder states, attention and logits.
pub fn reference_deviation(model: &Model, tokens: &[usize], user: usize, product: usize) -> f64 {
    let want = reference(model, tokens, user, product);
    let mut tape = Tape::with_params(model.params());
    let out = model.forward(&mut tape, tokens, user, product, &mut None).unwrap();
    let mut got: Vec<f64> = tape.value(out.words).data().to_vec();
    got.extend(tape.value(out.encodings).data());
    got.extend(tape.value(out.attention).data());
    got.extend(tape.value(out.logits).data());
    let expected = want.words.iter().chain(&want.states).flatten().chain(&want.attention).chain(&want.logits);
    assert_eq!(got.len(), expected.clone().count());
    got.iter().zip(expected).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

pub fn check_against_reference(model: &Model) {
    let d = reference_deviation(model, &[4, 1, 7], 2, 1);
    assert!(d <= 1e-10, "deviation {d:e}");
}

pub fn all_sites(kind: RepresentationKind) -> AttributeConfig {
    let mut a = AttributeConfig::new(kind, &InjectionSite::ALL, 2);
    if kind == RepresentationKind::Chim {
        a = a.with_chunks(2, 2);
    }
    a
}

/// Copies every parameter the base model has from `source`.
pub fn base_twin(source: &Model) -> Model {
    let mut base = Model::new(oracle_config(None), 0).unwrap();
    for id in base.params().ids().collect::<Vec<_>>() {
        let name = base.params().name(id).to_string();
        *base.params_mut().get_mut(id) = source.params().by_name(&name).unwrap().clone();
    }
    base
}

pub fn zero(model: &mut Model, name: &str) {
    let id = model.params().id(name).unwrap();
    model.params_mut().get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.0);
}

/// `source` cut down to CHIM at `site` alone, with every generator weight
/// zeroed and every generator bias at 20 so that all gates sit near one.
pub fn saturated_single(source: &Model, site: InjectionSite) -> Model {
    let mut a = all_sites(RepresentationKind::Chim);
    a.sites = vec![site];
    let mut single = Model::new(oracle_config(Some(a)), 0).unwrap();
    for id in single.params().ids().collect::<Vec<_>>() {
        let name = single.params().name(id).to_string();
        let mut t = source.params().by_name(&name).unwrap().clone();
        if name.starts_with("gen.") {
            let fill = if name.ends_with(".bias") { 20.0 } else { 0.0 };
            t.data_mut().iter_mut().for_each(|v| *v = fill);
        }
        *single.params_mut().get_mut(id) = t;
    }
    single
}

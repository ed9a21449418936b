//! Central finite-difference checks of analytic gradients.

use crate::autograd::{Tape, Var};
use crate::config::{AttributeConfig, InjectionSite, ModelConfig, RepresentationKind};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::params::ParamStore;
use crate::tensor::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GradcheckSettings {
    /// Finite-difference step.
    pub step: f64,
    /// Denominator floor, so that near-zero gradients are compared in
    /// absolute terms.
    pub floor: f64,
    pub tolerance: f64,
}

impl Default for GradcheckSettings {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-5,
            tolerance: 1e-4,
        }
    }
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Worst error over one parameter tensor.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GroupReport {
    pub name: String,
    pub values: usize,
    pub max_rel_error: f64,
    /// Analytic and numeric values at the worst entry.
    pub worst: (f64, f64),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradcheckReport {
    pub label: String,
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradcheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }
}

/// Compares the tape gradient of the scalar built by `loss` with central
/// differences, for every value of every parameter in `params`.
pub fn check_gradients(
    params: &mut ParamStore,
    loss: &dyn Fn(&mut Tape) -> Result<Var>,
    settings: &GradcheckSettings,
) -> Result<Vec<GroupReport>> {
    let analytic: Vec<Vec<f64>> = {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        let g = tape.backward(l)?;
        params
            .ids()
            .map(|id| {
                g.param(id)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; params.get(id).numel()])
            })
            .collect()
    };
    let eval = |params: &ParamStore| -> Result<f64> {
        let mut tape = Tape::with_params(params);
        let l = loss(&mut tape)?;
        Ok(tape.value(l).item())
    };
    let ids: Vec<_> = params.ids().collect();
    let mut reports = Vec::with_capacity(ids.len());
    for id in ids {
        let mut worst: f64 = 0.0;
        let mut worst_pair = (0.0, 0.0);
        let n = params.get(id).numel();
        for (k, &a) in analytic[id.index()].iter().enumerate() {
            let x = params.get(id).data()[k];
            params.get_mut(id).data_mut()[k] = x + settings.step;
            let up = eval(params)?;
            params.get_mut(id).data_mut()[k] = x - settings.step;
            let down = eval(params)?;
            params.get_mut(id).data_mut()[k] = x;
            let numeric = (up - down) / (2.0 * settings.step);
            let e = relative_error(a, numeric, settings.floor);
            if e > worst {
                worst = e;
                worst_pair = (a, numeric);
            }
        }
        reports.push(GroupReport {
            name: params.name(id).to_string(),
            values: n,
            max_rel_error: worst,
            worst: worst_pair,
        });
    }
    Ok(reports)
}

/// One labelled example used by the model check.
#[derive(Debug, Clone)]
pub struct CheckExample {
    pub tokens: Vec<usize>,
    pub user: usize,
    pub product: usize,
    pub label: usize,
}

/// The tiny model shape: vocabulary 20, widths 8 (4 per direction),
/// 3 classes, 4 users and 4 products, attribute width 4, chunk factors 2.
pub fn tiny_config(attributes: Option<AttributeConfig>) -> ModelConfig {
    let base = ModelConfig::uniform(8, 20, 3);
    match attributes {
        Some(a) => base.with_attributes(a, 5, 5),
        None => base,
    }
}

pub fn tiny_attributes(kind: RepresentationKind, sites: &[InjectionSite]) -> AttributeConfig {
    let mut a = AttributeConfig::new(kind, sites, 4);
    if kind == RepresentationKind::Chim {
        a = a.with_chunks(2, 2);
    }
    a
}

fn tiny_examples() -> Vec<CheckExample> {
    vec![
        CheckExample {
            tokens: vec![3, 7, 2, 19, 5],
            user: 1,
            product: 2,
            label: 0,
        },
        CheckExample {
            tokens: vec![11, 4, 4, 8],
            user: 3,
            product: 4,
            label: 2,
        },
    ]
}

/// The base model, the nine single-site configurations and the six CHIM
/// site pairs.
pub fn standard_configurations() -> Vec<(String, Option<AttributeConfig>)> {
    let mut out = vec![("base".to_string(), None)];
    out.push((
        "bias/attend".to_string(),
        Some(tiny_attributes(RepresentationKind::Bias, &[InjectionSite::Attention])),
    ));
    for kind in [RepresentationKind::Matrix, RepresentationKind::Chim] {
        for site in InjectionSite::ALL {
            out.push((
                format!("{}/{}", kind.label(), site.label()),
                Some(tiny_attributes(kind, &[site])),
            ));
        }
    }
    for (i, &a) in InjectionSite::ALL.iter().enumerate() {
        for &b in &InjectionSite::ALL[i + 1..] {
            out.push((
                format!("chim/{}+{}", a.label(), b.label()),
                Some(tiny_attributes(RepresentationKind::Chim, &[a, b])),
            ));
        }
    }
    out
}

/// Builds the tiny model for `attributes`, redraws every parameter uniformly
/// in `±0.5` and checks the summed cross-entropy of two examples.
pub fn check_model(
    label: &str,
    attributes: Option<AttributeConfig>,
    seed: u64,
    settings: &GradcheckSettings,
) -> Result<GradcheckReport> {
    let model = Model::new(tiny_config(attributes), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let mut params = model.params().clone();
    for id in params.ids().collect::<Vec<_>>() {
        let shape = params.get(id).shape().to_vec();
        *params.get_mut(id) = Tensor::uniform(&shape, 0.5, &mut rng);
    }
    let examples = tiny_examples();
    let loss = |tape: &mut Tape| -> Result<Var> {
        let mut total = None;
        for x in &examples {
            let (l, _) = model.loss(tape, &x.tokens, x.user, x.product, x.label, &mut None)?;
            total = Some(match total {
                None => l,
                Some(t) => tape.add(t, l)?,
            });
        }
        total.ok_or_else(|| Error::invalid("no examples"))
    };
    let groups = check_gradients(&mut params, &loss, settings)?;
    Ok(GradcheckReport {
        label: label.to_string(),
        groups,
        tolerance: settings.tolerance,
    })
}

/// Runs [`check_model`] over [`standard_configurations`].
pub fn check_standard(seed: u64, settings: &GradcheckSettings) -> Result<Vec<GradcheckReport>> {
    standard_configurations()
        .into_iter()
        .map(|(label, attrs)| check_model(&label, attrs, seed, settings))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn configuration_list() {
        let c = standard_configurations();
        assert_eq!(c.len(), 16);
        assert_eq!(c.iter().filter(|(l, _)| l.contains('+')).count(), 6);
        for (_, a) in &c {
            if let Some(a) = a {
                assert!(a.in_evaluated_grid());
                tiny_config(Some(a.clone())).validate().unwrap();
            }
        }
    }

    #[test]
    fn relative_error_uses_floor() {
        assert_eq!(relative_error(1.0, 1.0, 1e-6), 0.0);
        assert!((relative_error(2.0, 1.0, 1e-6) - 0.5).abs() < 1e-15);
        assert!((relative_error(1e-9, 0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }

    #[test]
    fn corrupted_rule_is_caught() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::vector(vec![0.3, -0.7, 1.1]), false);
        let good = |tape: &mut Tape| -> Result<Var> {
            let x = tape.param(w);
            let y = tape.tanh(x);
            Ok(tape.sum(y))
        };
        let bad = |tape: &mut Tape| -> Result<Var> {
            let x = tape.param(w);
            let value = tape.value(x).clone();
            let out = Tensor::vector(value.data().iter().map(|v| v.tanh()).collect());
            // derivative of tanh off by 10%
            let y = tape.custom(
                &[x],
                out,
                Box::new(|g, inputs| {
                    vec![g
                        .iter()
                        .zip(inputs[0].data())
                        .map(|(g, x)| 1.1 * g * (1.0 - x.tanh().powi(2)))
                        .collect()]
                }),
            );
            Ok(tape.sum(y))
        };
        let s = GradcheckSettings::default();
        let ok = check_gradients(&mut store, &good, &s).unwrap();
        assert!(ok[0].max_rel_error < 1e-8);
        let broken = check_gradients(&mut store, &bad, &s).unwrap();
        assert!(broken[0].max_rel_error > 0.05);
    }

    #[test]
    fn base_and_chim_pair_pass() {
        let s = GradcheckSettings::default();
        let r = check_model("base", None, 1, &s).unwrap();
        assert!(r.passed(), "{r:?}");
        let a = tiny_attributes(RepresentationKind::Chim, &[InjectionSite::Encoder, InjectionSite::Classifier]);
        let r = check_model("chim", Some(a), 1, &s).unwrap();
        assert!(r.passed(), "{r:?}");
    }
}

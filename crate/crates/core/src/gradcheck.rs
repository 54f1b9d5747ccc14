//! Central-difference gradient checks for graph ops and for whole models.
//!
//! Every check differentiates `sum(r * f(x))` for a fixed random `r`, so all
//! output elements contribute to the gradient.

use rand::seq::SliceRandom;
use rand::Rng as _;

use crate::error::{Error, Result};
use crate::model::{fdvm_forward, ModelWeights, ParamGroup};
use crate::rng::substream;
use crate::tensor::{Graph, Tensor, Var};

pub const DEFAULT_STEP: f64 = 1e-4;
/// Denominator floor for the relative error, so near-zero gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-6;

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

#[derive(Clone, Debug)]
pub struct GradEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

impl GradEntry {
    pub fn rel_error(&self) -> f64 {
        rel_error(self.analytic, self.numeric)
    }
}

#[derive(Clone, Debug, Default)]
pub struct GradCheck {
    pub entries: Vec<GradEntry>,
}

impl GradCheck {
    pub fn max_rel_error(&self) -> f64 {
        self.entries.iter().map(GradEntry::rel_error).fold(0.0, f64::max)
    }

    pub fn worst(&self) -> Option<&GradEntry> {
        self.entries.iter().max_by(|a, b| a.rel_error().total_cmp(&b.rel_error()))
    }

    pub fn failures(&self, tol: f64) -> Vec<&GradEntry> {
        self.entries.iter().filter(|e| e.rel_error().is_nan() || e.rel_error() > tol).collect()
    }
}

fn projection(dims: &[usize], seed: u64) -> Tensor {
    let mut r = substream(seed, "gradcheck-projection");
    Tensor::from_fn(dims, |_| r.random_range(-1.0..1.0))
}

fn projected(g: &mut Graph, out: Var, r: &Tensor) -> Result<Var> {
    let rv = g.constant(r.clone());
    let prod = g.hadamard(out, rv)?;
    Ok(g.sum(prod))
}

/// Checks `f` at `inputs`. Up to `max_per_input` elements of each input are
/// sampled (all of them when the input is smaller).
pub fn check_function(
    inputs: &[Tensor],
    f: impl Fn(&mut Graph, &[Var]) -> Result<Var>,
    max_per_input: usize,
    seed: u64,
) -> Result<GradCheck> {
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let out = f(&mut g, &vars)?;
    let r = projection(g.value(out).dims(), seed);
    let loss = projected(&mut g, out, &r)?;
    let grads = g.backward(loss)?;

    let eval = |xs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let out = f(&mut g, &vars)?;
        let loss = projected(&mut g, out, &r)?;
        Ok(g.value(loss).data()[0])
    };

    let mut pick = substream(seed, "gradcheck-pick");
    let mut report = GradCheck::default();
    for (k, v) in vars.iter().enumerate() {
        let analytic = grads.wrt(*v);
        let mut idx: Vec<usize> = (0..inputs[k].numel()).collect();
        idx.shuffle(&mut pick);
        idx.truncate(max_per_input);
        idx.sort_unstable();
        for i in idx {
            let numeric = central_difference(inputs, k, i, DEFAULT_STEP, &eval)?;
            report.entries.push(GradEntry { name: format!("input{k}"), index: i, analytic: analytic.data()[i], numeric });
        }
    }
    Ok(report)
}

fn central_difference(
    inputs: &[Tensor],
    k: usize,
    i: usize,
    h: f64,
    eval: &impl Fn(&[Tensor]) -> Result<f64>,
) -> Result<f64> {
    let mut xs = inputs.to_vec();
    xs[k].data_mut()[i] = inputs[k].data()[i] + h;
    let up = eval(&xs)?;
    xs[k].data_mut()[i] = inputs[k].data()[i] - h;
    let down = eval(&xs)?;
    Ok((up - down) / (2.0 * h))
}

/// Replaces every all-zero parameter (the zero-initialised output
/// projections, heads and biases) with `U(-scale, scale)` noise, so that
/// gradients reach every parameter of a fresh model.
pub fn randomize_zero_params(weights: &mut ModelWeights, scale: f64, seed: u64) {
    let mut r = substream(seed, "gradcheck-randomize");
    for p in weights.params_mut() {
        if p.data().iter().all(|&v| v == 0.0) {
            for v in p.data_mut() {
                *v = r.random_range(-scale..scale);
            }
        }
    }
}

/// End-to-end check of `samples` parameter elements of `weights` on `img`,
/// spread round-robin over the parameter groups present.
pub fn check_model(weights: &ModelWeights, img: &Tensor, samples: usize, seed: u64) -> Result<GradCheck> {
    let mut g = Graph::new();
    let bound = weights.bind(&mut g);
    let out = fdvm_forward(&mut g, &bound, img)?;
    let r = projection(g.value(out).dims(), seed);
    let loss = projected(&mut g, out, &r)?;
    let grads = g.backward(loss)?;

    let named = weights.named_params();
    let vars: Vec<Var> = bound.named_params().into_iter().map(|(_, v)| *v).collect();

    let mut groups: Vec<(ParamGroup, Vec<(usize, usize)>)> = Vec::new();
    for (p, (name, t)) in named.iter().enumerate() {
        let group = ParamGroup::of(name);
        let slot = match groups.iter().position(|(gr, _)| *gr == group) {
            Some(s) => s,
            None => {
                groups.push((group, Vec::new()));
                groups.len() - 1
            }
        };
        groups[slot].1.extend((0..t.numel()).map(|i| (p, i)));
    }
    let mut pick = substream(seed, "gradcheck-pick");
    for (_, cands) in &mut groups {
        cands.shuffle(&mut pick);
    }
    let mut chosen = Vec::with_capacity(samples);
    let mut round = 0;
    while chosen.len() < samples {
        let before = chosen.len();
        for (_, cands) in &groups {
            if let Some(&c) = cands.get(round) {
                if chosen.len() < samples {
                    chosen.push(c);
                }
            }
        }
        if chosen.len() == before {
            break;
        }
        round += 1;
    }
    if chosen.is_empty() {
        return Err(Error::Contract("model has no parameters".into()));
    }

    let eval = |w: &ModelWeights| -> Result<f64> {
        let mut g = Graph::new();
        let bound = w.bind_constant(&mut g);
        let out = fdvm_forward(&mut g, &bound, img)?;
        let loss = projected(&mut g, out, &r)?;
        Ok(g.value(loss).data()[0])
    };

    let mut report = GradCheck::default();
    let mut w = weights.clone();
    for (p, i) in chosen {
        let orig = named[p].1.data()[i];
        w.params_mut()[p].data_mut()[i] = orig + DEFAULT_STEP;
        let up = eval(&w)?;
        w.params_mut()[p].data_mut()[i] = orig - DEFAULT_STEP;
        let down = eval(&w)?;
        w.params_mut()[p].data_mut()[i] = orig;
        report.entries.push(GradEntry {
            name: named[p].0.clone(),
            index: i,
            analytic: grads.wrt(vars[p]).data()[i],
            numeric: (up - down) / (2.0 * DEFAULT_STEP),
        });
    }
    Ok(report)
}

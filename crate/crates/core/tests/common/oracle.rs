//! Independent re-evaluation of the multi-task loss for gradient checks.
//!
//! The network is evaluated in double-double arithmetic up to the logits and
//! the reconstruction, and loss differences between two parameter vectors
//! are formed term by term with `ln_1p`/`exp_m1`. Central differences then
//! carry a relative error near 1e-15 per term instead of the 1e-16 of the
//! whole loss, which is what makes small gradients checkable.

use gridmtl::mtl::{init_model, Batch, HeadKind, LayerRef, ModelConfig, MtlModel, Weighting};
use twofloat::TwoFloat;

#[derive(Clone, Copy, PartialEq)]
enum Act {
    Relu,
    Linear,
    Logit,
}

struct DdLayer {
    n_in: usize,
    n_out: usize,
    w: usize,
    b: usize,
    act: Act,
}

pub struct LossOracle {
    encoder: Vec<DdLayer>,
    recon: Vec<DdLayer>,
    heads: Vec<Vec<DdLayer>>,
    sigma: usize,
    joint: bool,
    active: [bool; 4],
    beta: [f64; 4],
    recon_weight: f64,
    l2_lambda: f64,
    l2: Vec<std::ops::Range<usize>>,
}

fn collect(model: &MtlModel, make: impl Fn(usize) -> LayerRef, last: Act, off: &mut usize) -> Vec<DdLayer> {
    let mut out = Vec::new();
    let mut i = 0;
    while let Some((w, b)) = model.layer_weights(make(i)) {
        let (n_out, n_in) = w.dim();
        assert_eq!(w.as_slice().unwrap(), &model.theta[*off..*off + n_out * n_in], "layer layout");
        let boff = *off + n_out * n_in;
        assert_eq!(b, &model.theta[boff..boff + n_out], "bias layout");
        out.push(DdLayer {
            n_in,
            n_out,
            w: *off,
            b: boff,
            act: Act::Relu,
        });
        *off = boff + n_out;
        i += 1;
    }
    out.last_mut().unwrap().act = last;
    out
}

struct Eval {
    /// `x̂ - x`, sample-major.
    resid: Vec<TwoFloat>,
    /// Task logits, sample-major, four per sample.
    logits: Vec<TwoFloat>,
}

fn dd(v: f64) -> TwoFloat {
    TwoFloat::from(v)
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl LossOracle {
    pub fn new(model: &MtlModel) -> Self {
        let mut off = 0;
        let encoder = collect(model, LayerRef::Encoder, Act::Relu, &mut off);
        let recon = collect(model, LayerRef::Recon, Act::Linear, &mut off);
        let n_heads = match model.config.head {
            HeadKind::PerTask => 4,
            HeadKind::Joint => 1,
        };
        let heads = (0..n_heads)
            .map(|h| collect(model, |i| LayerRef::Head(h, i), Act::Logit, &mut off))
            .collect();
        assert_eq!(off + 4, model.theta.len(), "parameter count");
        LossOracle {
            encoder,
            recon,
            heads,
            sigma: off,
            joint: model.config.head == HeadKind::Joint,
            active: model.config.active_tasks,
            beta: model.class_beta,
            recon_weight: model.config.recon_weight,
            l2_lambda: model.config.l2_lambda,
            l2: model.l2_ranges(),
        }
    }

    fn stack(theta: &[TwoFloat], layers: &[DdLayer], mut a: Vec<TwoFloat>) -> Vec<TwoFloat> {
        for l in layers {
            let mut z = Vec::with_capacity(l.n_out);
            for o in 0..l.n_out {
                let mut s = theta[l.b + o];
                let row = &theta[l.w + o * l.n_in..l.w + (o + 1) * l.n_in];
                for (wv, av) in row.iter().zip(&a) {
                    s += *wv * *av;
                }
                z.push(match l.act {
                    Act::Relu if s.hi() <= 0.0 => dd(0.0),
                    _ => s,
                });
            }
            a = z;
        }
        a
    }

    fn eval(&self, theta: &[TwoFloat], b: &Batch) -> Eval {
        let mut resid = Vec::new();
        let mut logits = Vec::new();
        for s in 0..b.len() {
            let mut input: Vec<TwoFloat> = b.x.row(s).iter().map(|&v| dd(v)).collect();
            input.extend(b.c.row(s).iter().map(|&v| dd(v)));
            let h = Self::stack(theta, &self.encoder, input);
            let mut rin = h.clone();
            rin.extend(b.c.row(s).iter().map(|&v| dd(v)));
            let xhat = Self::stack(theta, &self.recon, rin);
            resid.extend(xhat.iter().zip(b.x.row(s)).map(|(&p, &x)| p - x));
            if self.joint {
                logits.extend(Self::stack(theta, &self.heads[0], h));
            } else {
                for head in &self.heads {
                    logits.push(Self::stack(theta, head, h.clone())[0]);
                }
            }
        }
        Eval { resid, logits }
    }

    /// Mean weighted cross-entropy of one task in plain double precision.
    fn task_mean(ev: &Eval, b: &Batch, t: usize, beta: f64) -> f64 {
        let n = b.len();
        (0..n)
            .map(|s| {
                let z = ev.logits[4 * s + t].hi();
                let y = b.y[[s, t]];
                let p = sigmoid(z);
                -beta * y * p.ln() - (1.0 - beta) * (1.0 - y) * (1.0 - p).ln()
            })
            .sum::<f64>()
            / n as f64
    }

    /// `L(θ + e_i·h) − L(θ − e_i·h)`.
    pub fn loss_difference(&self, model: &MtlModel, b: &Batch, weighting: Weighting, i: usize, h: f64) -> f64 {
        let base: Vec<TwoFloat> = model.theta.iter().map(|&v| dd(v)).collect();
        let mut tp = base.clone();
        let mut tm = base;
        tp[i] += h;
        tm[i] -= h;
        let ep = self.eval(&tp, b);
        let em = self.eval(&tm, b);
        let n = b.len() as f64;

        let mut recon = dd(0.0);
        for (rp, rm) in ep.resid.iter().zip(&em.resid) {
            recon += (*rp - *rm) * (*rp + *rm);
        }
        let mut total = self.recon_weight * (recon.hi() / n);

        if self.l2.iter().any(|r| r.contains(&i)) {
            total += self.l2_lambda * (tp[i] * tp[i] - tm[i] * tm[i]).hi();
        }

        for t in 0..4 {
            if !self.active[t] {
                continue;
            }
            let beta = self.beta[t];
            let mut dl = 0.0;
            for s in 0..b.len() {
                let zp = ep.logits[4 * s + t];
                let zm = em.logits[4 * s + t];
                let pm = sigmoid(zm.hi());
                let pp = sigmoid(zp.hi());
                for p in [pm, pp] {
                    assert!(p > 1e-12 && p < 1.0 - 1e-12, "probability at the clamp");
                }
                let dz = (zp - zm).hi();
                let d_ln_p = -((1.0 - pm) * (-dz).exp_m1()).ln_1p();
                let d_ln_q = -(pm * dz.exp_m1()).ln_1p();
                let y = b.y[[s, t]];
                dl += -beta * y * d_ln_p - (1.0 - beta) * (1.0 - y) * d_ln_q;
            }
            dl /= n;
            match weighting {
                Weighting::Uniform => total += dl,
                Weighting::Adaptive => {
                    let s = model.theta[self.sigma + t];
                    if i == self.sigma + t {
                        let lm = Self::task_mean(&em, b, t, beta);
                        let alpha_m = 0.5 * (-s).exp() * h.exp();
                        let d_alpha = alpha_m * (-2.0 * h).exp_m1();
                        total += d_alpha * lm + 0.5 * 2.0 * h;
                    } else {
                        total += 0.5 * (-s).exp() * dl;
                    }
                }
            }
        }
        total
    }

    pub fn numeric_gradient(&self, model: &MtlModel, b: &Batch, weighting: Weighting, i: usize, h: f64) -> f64 {
        self.loss_difference(model, b, weighting, i, h) / (2.0 * h)
    }
}

pub struct GradientCheck {
    pub max_rel: f64,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    let den = a.abs().max(n.abs());
    if den == 0.0 {
        0.0
    } else {
        (a - n).abs() / den
    }
}

/// Compares `backward` with oracle central differences on `indices`.
pub fn gradient_check(
    model: &MtlModel,
    b: &Batch,
    weighting: Weighting,
    step: f64,
    indices: impl IntoIterator<Item = usize>,
) -> GradientCheck {
    let oracle = LossOracle::new(model);
    let (_, analytic) = model.backward(b, weighting, None).unwrap();
    let mut out = GradientCheck {
        max_rel: 0.0,
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    for i in indices {
        let n = oracle.numeric_gradient(model, b, weighting, i, step);
        let r = rel_err(analytic[i], n);
        out.checked += 1;
        if r > out.max_rel || out.checked == 1 {
            out.max_rel = out.max_rel.max(r);
            out.worst_index = i;
            out.analytic = analytic[i];
            out.numeric = n;
        }
    }
    out
}

/// Three-layer encoder, three-layer heads, 20 features, 8 condition inputs.
pub fn compact_model(head: HeadKind, active: [bool; 4], seed: u64) -> MtlModel {
    let cfg = ModelConfig {
        encoder_layers: vec![16, 12, 8],
        task_layers: vec![6, 4, 1],
        dropout_rate: 0.0,
        head,
        active_tasks: active,
        seed,
        ..ModelConfig::default()
    };
    let mut m = init_model(&cfg, 20, 8).unwrap();
    m.class_beta = [0.3, 0.6, 0.45, 0.8];
    m.set_log_sigma_sq([0.1, -0.2, 0.3, 0.0]);
    m
}

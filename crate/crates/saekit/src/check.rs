//! Finite-difference gradient checking.
//!
//! Every pullback in this crate is validated against central differences:
//!     numeric = (f(x + h) - f(x - h)) / 2h
//! A coordinate passes when |analytic - numeric| <= atol + rtol * scale with
//! scale = max(|analytic|, |numeric|): relative agreement at 1e-4 for
//! gradients large enough to resolve, an absolute floor for gradients that
//! sit at the level of difference-quotient noise. Checks run in f64 with a
//! small step (1e-5); in f32 the quotient loses too many digits to say
//! anything at these tolerances, and larger steps walk across ReLU/maxpool
//! kinks often enough to pollute deep-block checks.
//!
//! Two entry points: [`grad_check`] for closures over raw tape vars (ops and
//! small expressions), and [`grad_check_store`] for closures written against
//! a [`Session`] (blocks and whole networks), which perturbs named parameters
//! inside a scratch copy of the store.

use crate::autograd::{Tape, Var};
use crate::blocks::{NcabSpec, SaebSpec, SfdSpec, BN_EPS};
use crate::error::Result;
use crate::net::{saetcn_forward, sasnet_forward, SaetcnConfig, SasnetConfig};
use crate::nn::{ConvGeom, ConvTGeom, Mode, PoolGeom};
use crate::params::{ParamStore, Session};
use crate::rng::SplitMix64;
use crate::tensor::{Axis, Tensor};

/// Knobs for a finite-difference run.
#[derive(Debug, Clone)]
pub struct CheckOptions {
    /// Half-width h of the central difference.
    pub step: f64,
    /// Relative tolerance.
    pub tol: f64,
    /// Absolute floor below which disagreement is attributed to
    /// finite-difference noise rather than a wrong pullback.
    pub atol: f64,
    /// Check at most this many coordinates, sampled without replacement.
    /// `None` checks every coordinate.
    pub max_coords: Option<usize>,
    /// Seed for the coordinate sample.
    pub seed: u64,
    /// Session mode for store-backed checks. Train (the default) exercises
    /// the batch-statistic BN pullback; Eval normalizes with fixed running
    /// stats. Deep stacks of train-mode BNs are too ill-conditioned for
    /// finite differences (the 1/sigma(theta) terms give the loss third
    /// derivatives that swamp any step size), so whole-network checks run
    /// the inference path and leave batch statistics to the block checks.
    pub mode: Mode,
}

impl Default for CheckOptions {
    fn default() -> Self {
        CheckOptions {
            step: 1e-5,
            tol: 1e-4,
            atol: 1e-7,
            max_coords: None,
            seed: 0x5eed,
            mode: Mode::Train,
        }
    }
}

/// One coordinate that exceeded the tolerance.
#[derive(Debug, Clone)]
pub struct CheckFailure {
    /// Human-readable coordinate, e.g. `head.fc1.w[37]` or `data0[12]`.
    pub coord: String,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct CheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: Vec<CheckFailure>,
}

impl CheckReport {
    pub fn ok(&self) -> bool {
        self.failures.is_empty()
    }
}



/// Identity helper that pins a closure to the exact higher-ranked signature
/// [`grad_check`] expects. Without it, closure lifetime inference ties the
/// returned `Var` to a fresh lifetime instead of the tape's.
pub fn loss_fn<F>(f: F) -> F
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

/// Same pinning trick for [`grad_check_store`] closures.
pub fn session_loss_fn<F>(f: F) -> F
where
    F: for<'t, 's> Fn(&Session<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    f
}

/// Checks d(loss)/d(input) for a closure built from raw tape operations.
/// Every input is treated as differentiable.
pub fn grad_check<F>(f: F, inputs: &[Tensor<f64>], opts: &CheckOptions) -> Result<CheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let store = ParamStore::new();
    grad_check_store(
        move |sess, data| f(sess.tape(), data),
        &store,
        inputs,
        true,
        opts,
    )
}

/// Where one scalar coordinate lives: in a named parameter or in one of the
/// data tensors.
enum Slot {
    Param(usize, usize),
    Data(usize, usize),
}

/// Checks d(loss)/d(theta) for a closure written against a [`Session`],
/// covering every parameter the forward pass touches and, when
/// `check_data_grads` is set, the data tensors too.
pub fn grad_check_store<F>(
    f: F,
    store: &ParamStore<f64>,
    data: &[Tensor<f64>],
    check_data_grads: bool,
    opts: &CheckOptions,
) -> Result<CheckReport>
where
    F: for<'t, 's> Fn(&Session<'t, 's, f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    // Analytic pass: one forward, one backward.
    let tape = Tape::new();
    let sess = Session::new(&tape, store, opts.mode);
    let data_vars: Vec<Var<'_, f64>> =
        data.iter().map(|d| tape.leaf(d.clone(), check_data_grads)).collect();
    let loss = f(&sess, &data_vars)?;
    let grads = tape.backward(loss)?;
    let touched = sess.touched();

    // Flatten every checkable coordinate with its analytic gradient.
    let mut slots: Vec<(Slot, f64)> = Vec::new();
    for (pi, (name, vid)) in touched.iter().enumerate() {
        let g = grads
            .get(*vid)
            .unwrap_or_else(|| panic!("parameter '{name}' has no gradient"));
        for (off, &gv) in g.data().iter().enumerate() {
            slots.push((Slot::Param(pi, off), gv));
        }
    }
    if check_data_grads {
        for (di, dv) in data_vars.iter().enumerate() {
            let g = grads.get(dv.id()).expect("data leaf has no gradient");
            for (off, &gv) in g.data().iter().enumerate() {
                slots.push((Slot::Data(di, off), gv));
            }
        }
    }

    // Sample without replacement when the budget is smaller than the space.
    let chosen: Vec<usize> = match opts.max_coords {
        Some(k) if k < slots.len() => {
            let mut idx: Vec<usize> = (0..slots.len()).collect();
            let mut rng = SplitMix64::derive(opts.seed, 0x6fd);
            rng.shuffle(&mut idx);
            idx.truncate(k);
            idx.sort_unstable();
            idx
        }
        _ => (0..slots.len()).collect(),
    };

    // Numeric passes mutate one scratch copy in place.
    let mut work = store.clone();
    let mut work_data: Vec<Tensor<f64>> = data.to_vec();
    let eval = |work: &ParamStore<f64>, wd: &[Tensor<f64>]| -> Result<f64> {
        let tape = Tape::new();
        let sess = Session::new(&tape, work, opts.mode);
        let dv: Vec<Var<'_, f64>> = wd.iter().map(|d| tape.leaf(d.clone(), false)).collect();
        let loss = f(&sess, &dv)?;
        loss.value().scalar_value()
    };

    let h = opts.step;
    let mut report = CheckReport { checked: 0, max_rel_err: 0.0, failures: Vec::new() };
    for &si in &chosen {
        let (slot, analytic) = &slots[si];
        let (plus, minus, coord) = match slot {
            Slot::Param(pi, off) => {
                let name = &touched[*pi].0;
                let orig = work.param(name)?.data()[*off];
                work.param_mut(name)?.data_mut()[*off] = orig + h;
                let plus = eval(&work, &work_data)?;
                work.param_mut(name)?.data_mut()[*off] = orig - h;
                let minus = eval(&work, &work_data)?;
                work.param_mut(name)?.data_mut()[*off] = orig;
                (plus, minus, format!("{name}[{off}]"))
            }
            Slot::Data(di, off) => {
                let orig = work_data[*di].data()[*off];
                work_data[*di].data_mut()[*off] = orig + h;
                let plus = eval(&work, &work_data)?;
                work_data[*di].data_mut()[*off] = orig - h;
                let minus = eval(&work, &work_data)?;
                work_data[*di].data_mut()[*off] = orig;
                (plus, minus, format!("data{di}[{off}]"))
            }
        };
        let numeric = (plus - minus) / (2.0 * h);
        let scale = analytic.abs().max(numeric.abs());
        let re = (analytic - numeric).abs() / scale.max(opts.atol / opts.tol);
        report.checked += 1;
        report.max_rel_err = report.max_rel_err.max(re);
        if (analytic - numeric).abs() > opts.atol + opts.tol * scale {
            report.failures.push(CheckFailure {
                coord,
                analytic: *analytic,
                numeric,
                rel_err: re,
            });
        }
    }
    Ok(report)
}

/// One named entry of [`full_suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub report: CheckReport,
}

fn randn(shape: Vec<usize>, seed: u64) -> Tensor<f64> {
    let mut rng = SplitMix64::new(seed);
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.normal(0.0, 1.0)).collect()).unwrap()
}

/// The complete finite-difference battery: every layer operation, each block
/// (NCAB, SAEB at stride 1 and 2, SFD), and a width-scaled SAETCN and SAS-Net
/// driven end to end into a smooth scalar (the mean of the squared logits).
///
/// Everything runs in double precision on inputs derived from `seed`. Op and
/// block entries check every coordinate; the two network entries sample a few
/// hundred parameters, enough to cross every layer. The whole battery stays
/// well under the five-minute line on one core.
pub fn full_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut out = Vec::new();
    let mut entry_seed = {
        let mut k = 0u64;
        move || {
            k += 1;
            SplitMix64::derive(seed, k).next_u64()
        }
    };
    let mut push = |name: &'static str, report: CheckReport| {
        out.push(SuiteEntry { name, report });
    };
    let opts = CheckOptions::default();

    // ---- elementwise and shape ops ----
    let s = entry_seed();
    push(
        "op.add_broadcast",
        grad_check(
            loss_fn(|tape, vs| {
                let y = tape.add(vs[0], vs[1])?; // [N,C,H,W] + [C]
                let p = tape.mul(y, vs[0])?;
                Ok(tape.mean_all(p))
            }),
            &[randn(vec![2, 3, 2, 2], s), randn(vec![3], s ^ 1)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.sub_scale",
        grad_check(
            loss_fn(|tape, vs| {
                let d = tape.sub(vs[0], vs[1])?;
                let d = tape.scale(d, 3.0);
                let d = tape.add_scalar(d, 0.25);
                let sq = tape.mul(d, d)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![2, 4], s), randn(vec![2, 4], s ^ 1)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.matmul",
        grad_check(
            loss_fn(|tape, vs| {
                let y = tape.matmul(vs[0], vs[1])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![2, 3], s), randn(vec![3, 4], s ^ 1)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.linear",
        grad_check(
            loss_fn(|tape, vs| {
                let y = tape.linear(vs[0], vs[1], Some(vs[2]))?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![3, 4], s), randn(vec![2, 4], s ^ 1), randn(vec![2], s ^ 2)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.relu",
        grad_check(
            loss_fn(|tape, vs| {
                let r = tape.relu(vs[0]);
                let sq = tape.mul(r, r)?;
                Ok(tape.sum_all(sq))
            }),
            &[randn(vec![24], s)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.softmax",
        grad_check(
            loss_fn(|tape, vs| {
                let p = tape.softmax(vs[0])?;
                let w = tape.mul(p, vs[1])?;
                Ok(tape.mean_all(w))
            }),
            &[randn(vec![3, 5], s), randn(vec![3, 5], s ^ 1)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.concat_reshape",
        grad_check(
            loss_fn(|tape, vs| {
                let cat = tape.concat(&[vs[0], vs[1]], Axis(1))?;
                let flat = tape.reshape(cat, vec![12])?;
                let sq = tape.mul(flat, flat)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![2, 2], s), randn(vec![2, 4], s ^ 1)],
            &opts,
        )?,
    );

    // ---- spatial ops ----
    let s = entry_seed();
    let geom = ConvGeom::square(2, 3, 3, 1, 1).with_bias();
    push(
        "op.conv2d_s1",
        grad_check(
            loss_fn(move |tape, vs| {
                let y = tape.conv2d(vs[0], vs[1], Some(vs[2]), &geom)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[
                randn(vec![1, 2, 5, 5], s),
                randn(vec![3, 2, 3, 3], s ^ 1).scale(0.5),
                randn(vec![3], s ^ 2),
            ],
            &opts,
        )?,
    );
    let s = entry_seed();
    let geom = ConvGeom::square(3, 2, 3, 2, 1);
    push(
        "op.conv2d_s2",
        grad_check(
            loss_fn(move |tape, vs| {
                let y = tape.conv2d(vs[0], vs[1], None, &geom)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![2, 3, 6, 6], s), randn(vec![2, 3, 3, 3], s ^ 1).scale(0.5)],
            &opts,
        )?,
    );
    let s = entry_seed();
    let geom = ConvTGeom::square(3, 2, 2, 2);
    push(
        "op.conv_transpose2d",
        grad_check(
            loss_fn(move |tape, vs| {
                let y = tape.conv_transpose2d(vs[0], vs[1], &geom)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[randn(vec![1, 3, 4, 4], s), randn(vec![3, 2, 2, 2], s ^ 1)],
            &opts,
        )?,
    );
    let s = entry_seed();
    let geom = PoolGeom::square(3, 2, 1);
    push(
        "op.maxpool2d",
        grad_check(
            loss_fn(move |tape, vs| {
                let y = tape.maxpool2d(vs[0], &geom)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            // Spread out so no window has a near-tie within the FD step.
            &[randn(vec![1, 2, 6, 6], s).scale(10.0)],
            &opts,
        )?,
    );
    let s = entry_seed();
    push(
        "op.adaptive_avgpool",
        grad_check(
            loss_fn(|tape, vs| {
                let y = tape.adaptive_avgpool_1x1(vs[0])?;
                let sq = tape.mul(y, y)?;
                Ok(tape.sum_all(sq))
            }),
            &[randn(vec![2, 3, 4, 4], s)],
            &opts,
        )?,
    );

    // ---- normalization ----
    let s = entry_seed();
    push(
        "op.batchnorm_train",
        grad_check(
            loss_fn(|tape, vs| {
                let (y, _) = tape.batchnorm2d_train(vs[0], vs[1], vs[2], BN_EPS)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[
                randn(vec![2, 3, 3, 3], s),
                randn(vec![3], s ^ 1).scale(0.3),
                randn(vec![3], s ^ 2).scale(0.3),
            ],
            &opts,
        )?,
    );
    let s = entry_seed();
    let rm = randn(vec![3], s ^ 3).scale(0.1);
    let rv = {
        let mut t = randn(vec![3], s ^ 4);
        for v in t.data_mut() {
            *v = 1.0 + 0.2 * v.abs();
        }
        t
    };
    push(
        "op.batchnorm_eval",
        grad_check(
            loss_fn(move |tape, vs| {
                let y = tape.batchnorm2d_eval(vs[0], vs[1], vs[2], &rm, &rv, BN_EPS)?;
                let sq = tape.mul(y, y)?;
                Ok(tape.mean_all(sq))
            }),
            &[
                randn(vec![2, 3, 3, 3], s),
                randn(vec![3], s ^ 1).scale(0.3),
                randn(vec![3], s ^ 2).scale(0.3),
            ],
            &opts,
        )?,
    );

    // ---- losses ----
    let s = entry_seed();
    push(
        "op.cross_entropy",
        grad_check(
            loss_fn(|tape, vs| tape.cross_entropy(vs[0], &[1, 3, 0])),
            &[randn(vec![3, 4], s)],
            &opts,
        )?,
    );
    let s = entry_seed();
    let targets = {
        let mut rng = SplitMix64::new(s ^ 5);
        Tensor::new(vec![3, 4], (0..12).map(|_| rng.below(2) as f64).collect()).unwrap()
    };
    push(
        "op.bce_with_logits",
        grad_check(
            loss_fn(move |tape, vs| tape.bce_with_logits(vs[0], &targets)),
            &[randn(vec![3, 4], s)],
            &opts,
        )?,
    );

    // ---- blocks ----
    let s = entry_seed();
    let spec = NcabSpec { in_ch: 3, out_ch: 8 };
    let store = {
        let (mut defs, mut bufs) = (Vec::new(), Vec::new());
        spec.defs("ncab", &mut defs, &mut bufs);
        ParamStore::<f64>::init(&defs, &bufs, s)?
    };
    push(
        "block.ncab",
        grad_check_store(
            session_loss_fn(move |sess, data| {
                let y = spec.apply(sess, "ncab", data[0])?;
                let sq = sess.tape().mul(y, y)?;
                Ok(sess.tape().mean_all(sq))
            }),
            &store,
            &[randn(vec![1, 3, 16, 16], s ^ 1)],
            true,
            &opts,
        )?,
    );
    for (name, stride) in [("block.saeb_s1", 1usize), ("block.saeb_s2", 2)] {
        let s = entry_seed();
        let spec = SaebSpec { in_ch: 6, out_ch: 8, stride };
        let store = {
            let (mut defs, mut bufs) = (Vec::new(), Vec::new());
            spec.defs("saeb", &mut defs, &mut bufs)?;
            ParamStore::<f64>::init(&defs, &bufs, s)?
        };
        push(
            name,
            grad_check_store(
                session_loss_fn(move |sess, data| {
                    let y = spec.apply(sess, "saeb", data[0])?;
                    let sq = sess.tape().mul(y, y)?;
                    Ok(sess.tape().mean_all(sq))
                }),
                &store,
                &[randn(vec![1, 6, 6, 6], s ^ 1)],
                true,
                &opts,
            )?,
        );
    }
    let s = entry_seed();
    let spec = SfdSpec { in_ch: 8, skip_ch: 8, out_ch: 8 };
    let store = {
        let (mut defs, mut bufs) = (Vec::new(), Vec::new());
        spec.defs("sfd", &mut defs, &mut bufs)?;
        ParamStore::<f64>::init(&defs, &bufs, s)?
    };
    push(
        "block.sfd",
        grad_check_store(
            session_loss_fn(move |sess, data| {
                let y = spec.apply(sess, "sfd", data[0], data[1])?;
                let sq = sess.tape().mul(y, y)?;
                Ok(sess.tape().mean_all(sq))
            }),
            &store,
            &[randn(vec![1, 8, 2, 2], s ^ 1), randn(vec![1, 8, 4, 4], s ^ 2)],
            true,
            &opts,
        )?,
    );

    // ---- whole networks, width-scaled ----
    // Inference mode: see the note on CheckOptions::mode. Every pullback the
    // nets execute in eval mode is the train-mode one except BN's, and the
    // batch-statistic BN pullback has its own op and block entries above.
    let net_opts = |seed| CheckOptions {
        max_coords: Some(200),
        seed,
        mode: Mode::Eval,
        ..opts.clone()
    };
    let s = entry_seed();
    let cfg = SaetcnConfig { width_scale: 16, ..Default::default() };
    cfg.validate()?;
    let store = cfg.init_params::<f64>(s)?;
    push(
        "net.saetcn_w16",
        grad_check_store(
            session_loss_fn(move |sess, data| {
                let logits = saetcn_forward(&cfg, sess, data[0])?;
                let sq = sess.tape().mul(logits, logits)?;
                Ok(sess.tape().mean_all(sq))
            }),
            &store,
            &[randn(vec![2, 3, 64, 64], s ^ 1)],
            false,
            &net_opts(s),
        )?,
    );
    let s = entry_seed();
    let cfg = SasnetConfig { width_scale: 16, ..Default::default() };
    cfg.validate()?;
    let store = cfg.init_params::<f64>(s)?;
    push(
        "net.sasnet_w16",
        grad_check_store(
            session_loss_fn(move |sess, data| {
                let logits = sasnet_forward(&cfg, sess, data[0])?;
                let sq = sess.tape().mul(logits, logits)?;
                Ok(sess.tape().mean_all(sq))
            }),
            &store,
            &[randn(vec![1, 3, 64, 64], s ^ 1)],
            false,
            &net_opts(s),
        )?,
    );

    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_composite_passes() {
        let f = loss_fn(|tape, vs| {
            let s = tape.softmax(vs[0])?;
            let p = tape.mul(s, vs[1])?;
            Ok(tape.mean_all(p))
        });
        let inputs = [randn(vec![2, 3], 11), randn(vec![2, 3], 12)];
        let report = grad_check(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
        assert_eq!(report.checked, 12);
    }

    #[test]
    fn conv_chain_passes() {
        // conv -> square -> mean is smooth, so central differences are clean.
        let geom = ConvGeom::square(2, 3, 3, 1, 1).with_bias();
        let f = loss_fn(move |tape, vs| {
            let y = tape.conv2d(vs[0], vs[1], Some(vs[2]), &geom)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        });
        let inputs = [
            randn(vec![1, 2, 5, 5], 21),
            randn(vec![3, 2, 3, 3], 22).scale(0.5),
            randn(vec![3], 23),
        ];
        let report = grad_check(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn transposed_conv_chain_passes() {
        let geom = crate::nn::ConvTGeom::square(3, 2, 2, 2);
        let f = loss_fn(move |tape, vs| {
            let y = tape.conv_transpose2d(vs[0], vs[1], &geom)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        });
        let inputs = [randn(vec![1, 3, 4, 4], 31), randn(vec![3, 2, 2, 2], 32)];
        let report = grad_check(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn maxpool_passes_away_from_ties() {
        // Spread values out so no argmax flips within +-h of any coordinate.
        let geom = crate::nn::PoolGeom::square(2, 2, 0);
        let f = loss_fn(move |tape, vs| {
            let y = tape.maxpool2d(vs[0], &geom)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        });
        let x = randn(vec![1, 2, 4, 4], 41).scale(10.0);
        let report = grad_check(f, &[x], &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn batchnorm_train_passes_through_batch_statistics() {
        let f = loss_fn(|tape, vs| {
            let (y, _) = tape.batchnorm2d_train(vs[0], vs[1], vs[2], 1e-5)?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        });
        let inputs = [
            randn(vec![2, 3, 3, 3], 51),
            randn(vec![3], 52).scale(0.3),
            randn(vec![3], 53).scale(0.3),
        ];
        let report = grad_check(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn cross_entropy_and_concat_pass() {
        let f = loss_fn(|tape, vs| {
            let cat = tape.concat(&[vs[0], vs[1]], Axis(1))?;
            tape.cross_entropy(cat, &[1, 3])
        });
        let inputs = [randn(vec![2, 2], 61), randn(vec![2, 2], 62)];
        let report = grad_check(f, &inputs, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
    }

    #[test]
    fn relu_kink_is_detected_not_papered_over() {
        // x = 0 sits exactly on the kink: numeric says 0.5, analytic says 0.
        let f = loss_fn(|tape, vs| {
            let r = tape.relu(vs[0]);
            Ok(tape.sum_all(r))
        });
        let x = Tensor::new(vec![3], vec![-1.0, 0.0, 1.0]).unwrap();
        let report = grad_check(f, &[x], &CheckOptions::default()).unwrap();
        assert_eq!(report.failures.len(), 1);
        assert_eq!(report.failures[0].coord, "data0[1]");
    }

    #[test]
    fn sampling_is_deterministic_and_bounded() {
        let f = loss_fn(|tape, vs| {
            let sq = tape.mul(vs[0], vs[0])?;
            Ok(tape.mean_all(sq))
        });
        let x = randn(vec![100], 71);
        let opts = CheckOptions { max_coords: Some(7), ..Default::default() };
        let a = grad_check(f, std::slice::from_ref(&x), &opts).unwrap();
        let b = grad_check(f, std::slice::from_ref(&x), &opts).unwrap();
        assert_eq!(a.checked, 7);
        assert!(a.ok());
        assert_eq!(a.max_rel_err, b.max_rel_err);
    }

    #[test]
    fn full_suite_covers_ops_blocks_and_networks() {
        let entries = full_suite(0).unwrap();
        assert!(entries.len() >= 20, "only {} entries", entries.len());
        assert!(entries.iter().any(|e| e.name == "net.saetcn_w16"));
        assert!(entries.iter().any(|e| e.name == "net.sasnet_w16"));
        for e in &entries {
            assert!(e.report.checked > 0, "{} checked nothing", e.name);
            assert!(
                e.report.ok(),
                "{}: max rel {:.3e}, failures {:?}",
                e.name,
                e.report.max_rel_err,
                e.report.failures
            );
        }
    }

    #[test]
    fn store_variant_checks_named_parameters() {
        let defs = [
            crate::params::ParamDef::new(
                "w",
                vec![2, 3],
                crate::params::Init::KaimingUniform { fan_in: 3 },
            ),
            crate::params::ParamDef::new("b", vec![2], crate::params::Init::Zeros),
        ];
        let store = ParamStore::<f64>::init(&defs, &[], 81).unwrap();
        let f = session_loss_fn(|sess, data| {
            let tape = sess.tape();
            let w = sess.param("w")?;
            let b = sess.param("b")?;
            let y = tape.linear(data[0], w, Some(b))?;
            let sq = tape.mul(y, y)?;
            Ok(tape.mean_all(sq))
        });
        let x = randn(vec![4, 3], 82);
        let report =
            grad_check_store(f, &store, &[x], true, &CheckOptions::default()).unwrap();
        assert!(report.ok(), "failures: {:?}", report.failures);
        // 6 weights + 2 biases + 12 data coordinates.
        assert_eq!(report.checked, 20);
    }
}

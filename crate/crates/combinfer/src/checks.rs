//! Exhaustive correctness checks, shared by the `check` CLI subcommand and the
//! acceptance tests.
//!
//! The core oracle is *proper weighting by enumeration*: for a finite discrete
//! sampler, every execution path (including the resampler's segmented uniform)
//! is enumerated with its exact probability, so `E[w * h]` is a finite sum that
//! must match the target measure's own enumerated integral to float precision.
//! The suite runs this oracle over randomized programs spanning every
//! combinator shape, then adds hand-derived closed forms for the propose
//! site lattice, structural invariants of systematic resampling, and the
//! exact-cancellation identity of conditional sweep kernels.

use crate::autodiff::Value;
use crate::combinators::Program;
use crate::dist::{self, Distribution};
use crate::error::{Error, Result};
use crate::eval::{PrimitiveProgram, Session};
use crate::experiments::{pop_gibbs, run_gibbs, GibbsModel};
use crate::rng::{enumerate_paths, RandomStream};
use crate::trace::Address;

/// One named check outcome. `detail` carries the measured numbers so a failed
/// run is diagnosable from its printout alone.
#[derive(Clone, Debug)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn compare(name: impl Into<String>, got: f64, want: f64, tol: f64) -> Check {
        let diff = (got - want).abs();
        Check {
            name: name.into(),
            passed: diff <= tol,
            detail: format!("got {got:.12}, want {want:.12}, |diff| {diff:.3e} (tol {tol:.0e})"),
        }
    }

    fn bound(name: impl Into<String>, got: f64, tol: f64) -> Check {
        Check {
            name: name.into(),
            passed: got.abs() <= tol,
            detail: format!("|value| {:.3e} (tol {tol:.0e})", got.abs()),
        }
    }
}

fn unit(rng: &mut RandomStream) -> Result<f64> {
    rng.uniform()
}

/// A random discrete target: Bernoulli latents `x/0..x/n-1`, optionally an
/// observed Bernoulli whose probability depends on the latents, optionally an
/// explicit factor. Outputs the first latent.
fn random_target(
    name: &str,
    n: usize,
    with_observe: bool,
    with_factor: bool,
    rng: &mut RandomStream,
) -> Result<PrimitiveProgram> {
    let mut priors = Vec::with_capacity(n);
    for _ in 0..n {
        priors.push(0.2 + 0.6 * unit(rng)?);
    }
    let obs_base = 0.1 + 0.3 * unit(rng)?;
    let obs_gain = 0.1 + 0.4 * unit(rng)?;
    let fac_slope = 0.5 * unit(rng)?;
    let fac_shift = -0.3 * unit(rng)?;
    Ok(PrimitiveProgram::new(name, 0, move |scope, _| {
        let mut xs = Vec::with_capacity(priors.len());
        for (i, &p) in priors.iter().enumerate() {
            xs.push(scope.sample(format!("x/{i}"), dist::bernoulli(p))?);
        }
        if with_observe {
            let mut mean = xs[0].clone();
            for x in &xs[1..] {
                mean = mean.add(x)?;
            }
            let p = mean
                .mul(&Value::scalar(obs_gain / priors.len() as f64))?
                .add(&Value::scalar(obs_base))?;
            scope.observe("y", Distribution::bernoulli(p)?, Value::scalar(1.0))?;
        }
        if with_factor {
            let f = xs[0].mul(&Value::scalar(fac_slope))?.add(&Value::scalar(fac_shift))?;
            scope.factor_at("phi", f)?;
        }
        Ok(vec![xs[0].clone()])
    }))
}

/// A proposal over the same latent addresses, sample-only (plus an optional
/// factor, which exercises weighted proposals under resampling).
fn random_proposal(
    name: &str,
    n: usize,
    with_factor: bool,
    rng: &mut RandomStream,
) -> Result<PrimitiveProgram> {
    let mut probs = Vec::with_capacity(n);
    for _ in 0..n {
        probs.push(0.2 + 0.6 * unit(rng)?);
    }
    let fac_slope = 0.4 * unit(rng)?;
    let fac_shift = -0.2 * unit(rng)?;
    Ok(PrimitiveProgram::new(name, 0, move |scope, _| {
        let mut xs = Vec::with_capacity(probs.len());
        for (i, &p) in probs.iter().enumerate() {
            xs.push(scope.sample(format!("x/{i}"), dist::bernoulli(p))?);
        }
        if with_factor {
            let f = xs[0].mul(&Value::scalar(fac_slope))?.add(&Value::scalar(fac_shift))?;
            scope.factor_at("psi", f)?;
        }
        Ok(vec![xs[0].clone()])
    }))
}

/// An arity-1 Bernoulli transition kernel at a fixed address. Its probability
/// is affine in the (0/1-valued) input, so it stays inside (0, 1).
fn random_kernel(name: &str, addr: &str, rng: &mut RandomStream) -> Result<PrimitiveProgram> {
    let gain = 0.2 + 0.3 * unit(rng)?;
    let base = 0.2 + 0.2 * unit(rng)?;
    let addr = addr.to_string();
    Ok(PrimitiveProgram::new(name, 1, move |scope, inputs| {
        let p = inputs[0].mul(&Value::scalar(gain))?.add(&Value::scalar(base))?;
        let k = scope.sample(addr.as_str(), Distribution::bernoulli(p)?)?;
        Ok(vec![k])
    }))
}

/// One generated oracle case: the sampler, the trace address to probe with
/// `h`, and the particle count (2 for resampling shapes, else 1).
struct OracleCase {
    shape: &'static str,
    program: Program,
    probe: Address,
    particles: usize,
}

/// Build the `i`-th randomized case. Ten tree shapes cycle, together covering
/// every combinator in target, proposal, root, and nested positions up to
/// depth three.
fn oracle_case(i: usize, rng: &mut RandomStream) -> Result<OracleCase> {
    let n = 1 + (unit(rng)? * 3.0) as usize % 3;
    let with_observe = unit(rng)? < 0.7;
    let with_factor = unit(rng)? < 0.4;
    let target = random_target(&format!("f{i}"), n, with_observe, with_factor, rng)?;
    let proposal = random_proposal(&format!("q{i}"), n, false, rng)?;
    let weighted_proposal = random_proposal(&format!("qw{i}"), n, true, rng)?;
    let probe: Address = "x/0".into();
    let case = match i % 10 {
        0 => {
            // Resampling a weighted target must leave its integrals intact.
            // Force an observation so the weights are batched (rank 1).
            let t = random_target(&format!("fw{i}"), n, true, with_factor, rng)?;
            OracleCase {
                shape: "resample(target)",
                program: Program::resample(t.into(), 0)?,
                probe,
                particles: 2,
            }
        }
        1 => OracleCase {
            shape: "propose",
            program: Program::propose(target.into(), proposal.into())?,
            probe,
            particles: 1,
        },
        2 => {
            // Shared kernel address: the target's extension reuses the
            // composed kernel's site, exercising kernel-site accounting.
            let k_t = random_kernel(&format!("k{i}"), "aux/a", rng)?;
            let k_q = random_kernel(&format!("kq{i}"), "aux/a", rng)?;
            let ext = Program::extend(target.into(), k_t)?;
            let prop = Program::compose(k_q.into(), proposal.into());
            OracleCase {
                shape: "propose(extend, compose)",
                program: Program::propose(ext, prop)?,
                probe,
                particles: 1,
            }
        }
        3 => OracleCase {
            shape: "resample(propose)",
            program: Program::resample(Program::propose(target.into(), proposal.into())?, 0)?,
            probe,
            particles: 2,
        },
        4 => {
            let k = random_kernel(&format!("k{i}"), "aux/c", rng)?;
            OracleCase {
                shape: "compose(kernel, propose)",
                program: Program::compose(
                    k.into(),
                    Program::propose(target.into(), proposal.into())?,
                ),
                probe: "aux/c".into(),
                particles: 1,
            }
        }
        5 => OracleCase {
            shape: "propose(target, resample)",
            program: Program::propose(
                target.into(),
                Program::resample(weighted_proposal.into(), 0)?,
            )?,
            probe,
            particles: 2,
        },
        6 => {
            // Depth-3 target tree with two extension kernels; the proposal
            // composes matching kernels in the same order.
            let k1_t = random_kernel(&format!("k1t{i}"), "aux/d", rng)?;
            let k2_t = random_kernel(&format!("k2t{i}"), "aux/e", rng)?;
            let k1_q = random_kernel(&format!("k1q{i}"), "aux/d", rng)?;
            let k2_q = random_kernel(&format!("k2q{i}"), "aux/e", rng)?;
            let ext = Program::extend(Program::extend(target.into(), k1_t)?, k2_t)?;
            let prop = Program::compose(
                k2_q.into(),
                Program::compose(k1_q.into(), proposal.into()),
            );
            OracleCase {
                shape: "propose(extend^2, compose^2)",
                program: Program::propose(ext, prop)?,
                probe,
                particles: 1,
            }
        }
        7 => {
            let mid = random_target(&format!("m{i}"), n, unit(rng)? < 0.5, false, rng)?;
            OracleCase {
                shape: "propose(target, propose)",
                program: Program::propose(
                    target.into(),
                    Program::propose(mid.into(), proposal.into())?,
                )?,
                probe,
                particles: 1,
            }
        }
        8 => {
            let k = random_kernel(&format!("k{i}"), "aux/f", rng)?;
            OracleCase {
                shape: "resample(compose(kernel, propose))",
                program: Program::resample(
                    Program::compose(
                        k.into(),
                        Program::propose(target.into(), proposal.into())?,
                    ),
                    0,
                )?,
                probe: "aux/f".into(),
                particles: 2,
            }
        }
        _ => {
            let k_t = random_kernel(&format!("k{i}"), "aux/g", rng)?;
            let k_q = random_kernel(&format!("kq{i}"), "aux/g", rng)?;
            let prop = Program::resample(
                Program::compose(k_q.into(), weighted_proposal.into()),
                0,
            )?;
            OracleCase {
                shape: "propose(extend, resample(compose))",
                program: Program::propose(Program::extend(target.into(), k_t)?, prop)?,
                probe,
                particles: 2,
            }
        }
    };
    Ok(case)
}

/// Enumerate the target measure's integrals `∫γ` and `∫γ·h` directly: every
/// support point appears as exactly one enumerated path, and the density
/// map's total is the log joint γ at that point. This is the reference side
/// of the proper-weighting oracle, computed without touching any weight the
/// sampler produced.
fn enumerated_target_integrals(target: &Program, probe: &Address) -> Result<(f64, f64)> {
    let paths = enumerate_paths(|rng| {
        let stream = std::mem::replace(rng, RandomStream::seeded(0, 0));
        let mut session = Session::new(stream);
        let run = target.run(&[], &mut session);
        *rng = session.rng;
        let out = run?;
        let gamma = out.densities.total()?.data().data()[0].exp();
        let h = match out.trace.get(probe) {
            Some(v) => v.data().data()[0],
            None => return Err(Error::IncompleteTrace(format!("probe {probe} missing"))),
        };
        Ok((gamma, h))
    })?;
    let mut z = 0.0;
    let mut zh = 0.0;
    for path in &paths {
        let (gamma, h) = path.value;
        z += gamma;
        zh += gamma * h;
    }
    Ok((z, zh))
}

/// Enumerate `E[w]` and `E[w * trace(probe)]` of a finite discrete program by
/// walking every execution path with its exact probability.
fn enumerated_moments(program: &Program, probe: &Address, particles: usize) -> Result<(f64, f64)> {
    let sample_shape = if particles > 1 { vec![particles] } else { vec![] };
    let paths = enumerate_paths(|rng| {
        // The driver owns the stream; lend it to a session for this one path.
        let stream = std::mem::replace(rng, RandomStream::seeded(0, 0));
        let mut session = Session::new(stream).with_sample_shape(sample_shape.clone());
        let run = program.run(&[], &mut session);
        *rng = session.rng;
        let out = run?;
        let w: Vec<f64> = out.log_weight.value().data().data().iter().map(|x| x.exp()).collect();
        let h: Vec<f64> = match out.trace.get(probe) {
            Some(v) => v.data().data().to_vec(),
            None => return Err(Error::IncompleteTrace(format!("probe {probe} missing"))),
        };
        if w.len() != h.len() {
            return Err(Error::ShapeMismatch { expected: vec![w.len()], got: vec![h.len()] });
        }
        Ok((w, h))
    })?;
    let mut e_w = 0.0;
    let mut e_wh = 0.0;
    for path in &paths {
        let pr = path.log_prob.exp();
        let (w, h) = &path.value;
        let l = w.len() as f64;
        e_w += pr * w.iter().sum::<f64>() / l;
        e_wh += pr * w.iter().zip(h).map(|(w, h)| w * h).sum::<f64>() / l;
    }
    Ok((e_w, e_wh))
}

/// Proper weighting by enumeration over `cases` randomized combinator trees:
/// for each, the sampler's `E[w * h]` must equal the denoted target measure's
/// own enumerated integral for h = 1 and h = (probed trace value).
pub fn enumeration_proper_weighting(seed: u64, cases: usize) -> Result<Vec<Check>> {
    let mut rng = RandomStream::seeded(seed, 7_000);
    let mut out = Vec::with_capacity(cases);
    for i in 0..cases {
        let case = oracle_case(i, &mut rng)?;
        let (got_z, got_h) = enumerated_moments(&case.program, &case.probe, case.particles)?;
        let reference = Program::Target(case.program.target_program()?);
        let (want_z, want_h) = enumerated_target_integrals(&reference, &case.probe)?;
        let dz = (got_z - want_z).abs();
        let dh = (got_h - want_h).abs();
        let passed = dz <= 1e-9 && dh <= 1e-9;
        out.push(Check {
            name: format!("enumeration/{i:02}-{}", case.shape),
            passed,
            detail: format!(
                "E[w] {got_z:.12} vs {want_z:.12} (|d| {dz:.2e}); E[w*h] {got_h:.12} vs {want_h:.12} (|d| {dh:.2e})"
            ),
        });
    }
    Ok(out)
}

/// Hand-derived closed forms for the propose site lattice: proposals whose
/// trace exactly matches, strictly contains (superfluous site), or misses
/// sites of the target, plus an empty proposal (pure likelihood weighting).
pub fn propose_site_lattice() -> Result<Vec<Check>> {
    const A: f64 = 0.3; // prior on x
    const B0: f64 = 0.2; // observation base rate
    const B1: f64 = 0.5; // observation gain
    const C: f64 = 0.6; // proposal prob on x
    const E: f64 = 0.45; // prior on the target-only latent z

    let target_xy = || {
        PrimitiveProgram::new("p", 0, |scope, _| {
            let x = scope.sample("x", dist::bernoulli(A))?;
            let py = x.mul(&Value::scalar(B1))?.add(&Value::scalar(B0))?;
            scope.observe("y", Distribution::bernoulli(py)?, Value::scalar(1.0))?;
            Ok(vec![x])
        })
    };
    let z_exact = A * (B0 + B1) + (1.0 - A) * B0;

    let e_w = |program: &Program| -> Result<f64> {
        Ok(enumerated_moments(program, &"x".into(), 1)?.0)
    };

    let mut checks = Vec::new();

    // Exact match: proposal covers exactly the target's latent sites.
    let exact = Program::propose(
        target_xy().into(),
        PrimitiveProgram::new("q", 0, |scope, _| {
            let x = scope.sample("x", dist::bernoulli(C))?;
            Ok(vec![x])
        })
        .into(),
    )?;
    checks.push(Check::compare("lattice/exact-sites", e_w(&exact)?, z_exact, 1e-12));

    // Superfluous site: the proposal draws an extra latent the target never
    // consumes; it must marginalize out exactly, for any superfluous prob.
    let superfluous = |d: f64| -> Result<Program> {
        Program::propose(
            target_xy().into(),
            PrimitiveProgram::new("q", 0, move |scope, _| {
                let x = scope.sample("x", dist::bernoulli(C))?;
                scope.sample("s", dist::bernoulli(d))?;
                Ok(vec![x])
            })
            .into(),
        )
    };
    let w_lo = e_w(&superfluous(0.35)?)?;
    let w_hi = e_w(&superfluous(0.8)?)?;
    checks.push(Check::compare("lattice/superfluous-site", w_lo, z_exact, 1e-12));
    checks.push(Check::compare("lattice/superfluous-site-invariance", w_lo, w_hi, 1e-15));

    // Missing site: the target draws its own latent z; the weight averages
    // over it, so E[w] is the full double sum.
    let target_xzy = PrimitiveProgram::new("p2", 0, |scope, _| {
        let x = scope.sample("x", dist::bernoulli(A))?;
        let z = scope.sample("z", dist::bernoulli(E))?;
        let py = x.mul(&z)?.mul(&Value::scalar(B1))?.add(&Value::scalar(B0))?;
        scope.observe("y", Distribution::bernoulli(py)?, Value::scalar(1.0))?;
        Ok(vec![x])
    });
    let missing = Program::propose(
        target_xzy.into(),
        PrimitiveProgram::new("q", 0, |scope, _| {
            let x = scope.sample("x", dist::bernoulli(C))?;
            Ok(vec![x])
        })
        .into(),
    )?;
    let z_missing = B0 + B1 * A * E;
    checks.push(Check::compare("lattice/missing-site", e_w(&missing)?, z_missing, 1e-12));

    // Empty proposal: no shared sites at all reduces to likelihood weighting.
    let empty = Program::propose(
        target_xy().into(),
        PrimitiveProgram::new("q0", 0, |_, _| Ok(vec![Value::scalar(0.0)])).into(),
    )?;
    checks.push(Check::compare("lattice/empty-proposal", e_w(&empty)?, z_exact, 1e-12));

    Ok(checks)
}

/// Structural invariants of systematic resampling: outgoing weights equal the
/// log-mean of incoming weights, offspring counts stay within one of their
/// expectation, and `E[w * h]` is preserved through the resampler.
pub fn resample_invariants(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();

    // Continuous weighted programs: x ~ N(0,1) with log-weight s*x, so the
    // 1,000 weight vectors range from near-uniform to sharply spiked and
    // every particle is identifiable by its value.
    let l = 8;
    let mut worst_mean = 0.0f64;
    let mut worst_offspring = 0.0f64;
    let mut meta = RandomStream::seeded(seed, 9_000);
    for s in 0..1_000u64 {
        let scale = 0.25 + 3.0 * meta.uniform()?;
        let weighted = PrimitiveProgram::new("w", 0, move |scope, _| {
            let x = scope.sample("x", dist::normal(0.0, 1.0))?;
            scope.factor_at("phi", x.mul(&Value::scalar(scale))?)?;
            Ok(vec![x])
        });
        let mut inner_session =
            Session::new(RandomStream::seeded(seed, 100 + s)).with_sample_shape(vec![l]);
        let incoming = Program::from(weighted.clone()).run(&[], &mut inner_session)?;
        let mut outer_session =
            Session::new(RandomStream::seeded(seed, 100 + s)).with_sample_shape(vec![l]);
        let resampled =
            Program::resample(weighted.into(), 0)?.run(&[], &mut outer_session)?;

        let w_in = incoming.log_weight.value().data().data().to_vec();
        let w_out = resampled.log_weight.value().data().data().to_vec();
        let max = w_in.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lme = max + (w_in.iter().map(|x| (x - max).exp()).sum::<f64>() / l as f64).ln();
        for &w in &w_out {
            worst_mean = worst_mean.max((w - lme).abs());
        }

        // Offspring counts by exact value matching (gather copies bits).
        let x_in = incoming.trace.get(&"x".into()).unwrap().data().data().to_vec();
        let x_out = resampled.trace.get(&"x".into()).unwrap().data().data().to_vec();
        let total: f64 = w_in.iter().map(|x| (x - max).exp()).sum();
        for (i, &xi) in x_in.iter().enumerate() {
            let count = x_out.iter().filter(|&&xo| xo == xi).count() as f64;
            let expected = l as f64 * (w_in[i] - max).exp() / total;
            worst_offspring = worst_offspring.max((count - expected).abs());
        }
    }
    checks.push(Check::bound("resample/outgoing-weights-are-log-mean", worst_mean, 1e-12));
    checks.push(Check {
        name: "resample/offspring-within-one-of-expectation".into(),
        passed: worst_offspring < 1.0,
        detail: format!(
            "worst |count - L*w| over 1000 weight vectors = {worst_offspring:.6} (bound 1.0)"
        ),
    });

    // E[w * h] preservation at scale: the two-coin posterior model, h = x.
    let coin = || {
        PrimitiveProgram::new("coin", 0, |scope, _| {
            let x = scope.sample("x", dist::bernoulli(0.5))?;
            let py = x.mul(&Value::scalar(0.7))?.add(&Value::scalar(0.2))?;
            scope.observe("y", Distribution::bernoulli(py)?, Value::scalar(1.0))?;
            Ok(vec![x])
        })
    };
    let big = 100_000;
    let moment = |program: Program, stream: u64| -> Result<(f64, f64)> {
        let mut session =
            Session::new(RandomStream::seeded(seed, stream)).with_sample_shape(vec![big]);
        let out = program.run(&[], &mut session)?;
        let w: Vec<f64> =
            out.log_weight.value().data().data().iter().map(|x| x.exp()).collect();
        let h = out.trace.get(&"x".into()).unwrap().data().data().to_vec();
        let wh: Vec<f64> = w.iter().zip(&h).map(|(w, h)| w * h).collect();
        let mean = wh.iter().sum::<f64>() / big as f64;
        let var = wh.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (big - 1) as f64;
        Ok((mean, (var / big as f64).sqrt()))
    };
    let (m_in, se_in) = moment(coin().into(), 500)?;
    let (m_out, se_out) = moment(Program::resample(coin().into(), 0)?, 500)?;
    let tol = 4.0 * (se_in * se_in + se_out * se_out).sqrt();
    checks.push(Check::compare("resample/preserves-weighted-moments", m_out, m_in, tol));
    // And both must agree with the exact moment E[w * x] = 0.45.
    checks.push(Check::compare("resample/moment-matches-exact", m_in, 0.45, 4.0 * se_in));

    Ok(checks)
}

/// Conditional sweep kernels: exact block conditionals make every
/// post-initialization proposal step a zero-increment move, and the sweep
/// program has the advertised combinator counts.
pub fn gibbs_identities(seed: u64) -> Result<Vec<Check>> {
    let mut checks = Vec::new();
    let model = GibbsModel::default();

    let sweeps = 3;
    let counts = pop_gibbs(model, sweeps)?.node_counts();
    let structural = counts.proposes == 1 + 2 * sweeps
        && counts.resamples == 2 * sweeps
        && counts.composes == 2 * sweeps
        && counts.extends == 2 * sweeps;
    checks.push(Check {
        name: "gibbs/sweep-node-counts".into(),
        passed: structural,
        detail: format!(
            "proposes {} (want {}), resamples {} (want {}), composes {} (want {}), extends {} (want {})",
            counts.proposes,
            1 + 2 * sweeps,
            counts.resamples,
            2 * sweeps,
            counts.composes,
            2 * sweeps,
            counts.extends,
            2 * sweeps,
        ),
    });

    let summary = run_gibbs(model, 2, 256, seed)?;
    checks.push(Check::bound(
        "gibbs/exact-conditionals-cancel-increments",
        summary.max_block_increment,
        1e-9,
    ));
    checks.push(Check::compare(
        "gibbs/evidence-matches-closed-form",
        summary.log_z_hat,
        model.exact_log_marginal(),
        0.25,
    ));
    Ok(checks)
}

/// Every suite, in printing order.
pub fn run_all(seed: u64) -> Result<Vec<Check>> {
    let mut checks = enumeration_proper_weighting(seed, 20)?;
    checks.extend(propose_site_lattice()?);
    checks.extend(resample_invariants(seed)?);
    checks.extend(gibbs_identities(seed)?);
    Ok(checks)
}

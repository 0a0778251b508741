//! Training a proposal with the two classic variational objectives, on a
//! model whose posterior is known exactly.
//!
//!     cargo run --release -p combinfer --example train_svi_rws
//!
//! Model: x ~ N(0, 1), y | x ~ N(x, 1), y observed at 1.0. The posterior is
//! N(0.5, sqrt(0.5)) and the evidence is log N(1; 0, sqrt(2)) ≈ -1.5155.
//! Proposal family: x ~ N(mu, exp(s)), trained two ways:
//!
//! * SVI descends the reparameterized negative ELBO (reverse KL): gradients
//!   flow through the samples themselves, and the loss value converges to
//!   -log Z as the KL gap closes.
//! * RWS descends the wake-phase objective (forward KL): self-normalized
//!   posterior weights score the proposal's own density, no pathwise term.
//!
//! Both recover the exact posterior here, since it lies inside the family.

use std::sync::Arc;

use combinfer::dist::{self, Distribution};
use combinfer::nn::Adam;
use combinfer::tensor::TensorData;
use combinfer::{
    backward, LossFn, Parameter, PrimitiveProgram, Program, RandomStream, RwsLoss, SampleMode,
    Session, SviLoss, Tape, Value,
};

fn target() -> PrimitiveProgram {
    PrimitiveProgram::new("conjugate", 0, |scope, _| {
        let x = scope.sample("x", dist::normal(0.0, 1.0))?;
        let lik = Distribution::normal(x.clone(), Value::scalar(1.0))?;
        scope.observe("y", lik, Value::scalar(1.0))?;
        Ok(vec![x])
    })
}

struct Fit {
    mu: f64,
    sigma: f64,
    final_loss: f64,
}

fn train(objective: Arc<dyn LossFn>, mode: SampleMode, label: &str) -> combinfer::Result<Fit> {
    let mu = Parameter::new("mu", TensorData::scalar(0.0));
    let s = Parameter::new("s", TensorData::scalar(0.0)); // sigma = exp(s), so sigma starts at 1
    let mut opt = Adam::new(vec![mu.clone(), s.clone()], 0.05);
    let iterations = 800;
    let particles = 256;
    let mut final_loss = f64::NAN;
    println!("{label}:");
    for i in 0..iterations {
        let tape = Tape::new();
        let muv = mu.to_value(Some(&tape));
        let sigv = s.to_value(Some(&tape)).exp();
        let proposal = PrimitiveProgram::new("q", 0, move |scope, _| {
            let d = Distribution::normal(muv.clone(), sigv.clone())?;
            Ok(vec![scope.sample("x", d)?])
        });
        let program = Program::propose(target().into(), proposal.into())?;
        let mut session = Session::new(RandomStream::seeded(21, i as u64))
            .with_sample_shape(vec![particles])
            .with_tape(tape)
            .with_mode(mode)
            .with_objective(objective.clone());
        program.run(&[], &mut session)?;
        let loss = session.loss().clone();
        backward(&loss)?;
        opt.step();
        final_loss = loss.item();
        if (i + 1) % 200 == 0 {
            println!(
                "  iter {:>3}: loss {:+.4}, mu {:+.4}, sigma {:.4}",
                i + 1,
                final_loss,
                mu.snapshot().data()[0],
                s.snapshot().data()[0].exp()
            );
        }
    }
    Ok(Fit { mu: mu.snapshot().data()[0], sigma: s.snapshot().data()[0].exp(), final_loss })
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let exact_mu = 0.5;
    let exact_sigma = 0.5f64.sqrt();
    let log_z = -0.5 * (4.0 * std::f64::consts::PI).ln() - 0.25;
    println!(
        "exact posterior: N({exact_mu}, {exact_sigma:.4}); exact log Z = {log_z:.4}\n"
    );

    let svi = train(Arc::new(SviLoss), SampleMode::Reparam, "SVI (reparameterized reverse KL)")?;
    println!(
        "  -> mu {:+.4} (exact {exact_mu}), sigma {:.4} (exact {exact_sigma:.4}), \
         final loss {:+.4} (exact -log Z = {:.4})\n",
        svi.mu,
        svi.sigma,
        svi.final_loss,
        -log_z
    );

    let rws = train(Arc::new(RwsLoss), SampleMode::Detached, "RWS (wake-phase forward KL)")?;
    println!(
        "  -> mu {:+.4} (exact {exact_mu}), sigma {:.4} (exact {exact_sigma:.4})",
        rws.mu, rws.sigma
    );
    Ok(())
}

//! Random streams: seeded, splittable, and enumerable.
//!
//! A [`RandomStream`] is either a real ChaCha8 generator (keyed by the run seed,
//! with an explicit 64-bit stream id so independent consumers — iterations, eval
//! batches, worker shards — can be split off without draw-count bookkeeping), or a
//! *scripted* stream used by the exhaustive-enumeration driver: every discrete
//! choice reads the next entry of a script and records its support and
//! probability, so a driver can walk every execution path of a finite program
//! and weight it by its exact path probability.
//!
//! Continuous draws are rejected in scripted mode; the enumeration oracles only
//! apply to finite discrete programs.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

enum Kind {
    Rng(Box<ChaCha8Rng>),
    Script(ScriptState),
}

/// One recorded branch point: which alternative was taken out of how many,
/// and the log-probability of that alternative.
#[derive(Debug, Clone, Copy)]
pub struct Choice {
    pub taken: usize,
    pub support: usize,
    pub log_prob: f64,
}

struct ScriptState {
    /// Prefix of choices this run must follow; extended with first alternatives
    /// once the prefix is exhausted.
    script: Vec<usize>,
    pos: usize,
    choices: Vec<Choice>,
}

pub struct RandomStream {
    kind: Kind,
    seed: u64,
    next_child: u64,
}

impl RandomStream {
    /// Stream `stream` of the generator keyed by `seed`.
    pub fn seeded(seed: u64, stream: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(stream);
        RandomStream { kind: Kind::Rng(Box::new(rng)), seed, next_child: stream.wrapping_mul(0x9e37_79b9_7f4a_7c15).wrapping_add(1) }
    }

    /// Split off an independent child stream. Children of distinct parents do
    /// not collide in practice: the child stream id mixes the parent's id.
    pub fn split(&mut self) -> RandomStream {
        let id = self.next_child;
        self.next_child = self.next_child.wrapping_add(1);
        RandomStream::seeded(self.seed, id)
    }

    fn scripted(script: Vec<usize>) -> Self {
        RandomStream {
            kind: Kind::Script(ScriptState { script, pos: 0, choices: Vec::new() }),
            seed: 0,
            next_child: 0,
        }
    }

    pub fn is_enumerating(&self) -> bool {
        matches!(self.kind, Kind::Script(_))
    }

    /// `n` standard-normal draws. Unavailable in scripted mode.
    pub fn standard_normal(&mut self, n: usize) -> Result<Vec<f64>> {
        match &mut self.kind {
            Kind::Rng(rng) => Ok((0..n).map(|_| StandardNormal.sample(rng.as_mut())).collect()),
            Kind::Script(_) => Err(Error::NotEnumerable("continuous (normal) draw".into())),
        }
    }

    /// Draw an index from an explicit finite distribution. `probs` must be
    /// non-negative; they are treated as already normalized.
    pub fn categorical(&mut self, probs: &[f64]) -> Result<usize> {
        match &mut self.kind {
            Kind::Rng(rng) => {
                let u: f64 = rng.gen::<f64>();
                let mut acc = 0.0;
                for (i, &p) in probs.iter().enumerate() {
                    acc += p;
                    if u < acc {
                        return Ok(i);
                    }
                }
                Ok(probs.len() - 1)
            }
            Kind::Script(st) => st.take(probs),
        }
    }

    /// A single uniform in [0, 1). Unavailable in scripted mode (the resampler
    /// uses [`RandomStream::uniform_segmented`] there).
    pub fn uniform(&mut self) -> Result<f64> {
        match &mut self.kind {
            Kind::Rng(rng) => Ok(rng.gen::<f64>()),
            Kind::Script(_) => Err(Error::NotEnumerable("raw uniform draw".into())),
        }
    }

    /// A uniform in [0, 1) for a consumer that is piecewise constant between the
    /// given sorted interior `breakpoints`. In rng mode this is a plain uniform;
    /// in scripted mode the driver branches over the segments, weighting each by
    /// its length and standing in the segment midpoint.
    pub fn uniform_segmented(&mut self, breakpoints: &[f64]) -> Result<f64> {
        match &mut self.kind {
            Kind::Rng(rng) => Ok(rng.gen::<f64>()),
            Kind::Script(st) => {
                let mut edges = Vec::with_capacity(breakpoints.len() + 2);
                edges.push(0.0);
                edges.extend(breakpoints.iter().copied().filter(|b| *b > 0.0 && *b < 1.0));
                edges.push(1.0);
                let lengths: Vec<f64> = edges.windows(2).map(|w| w[1] - w[0]).collect();
                let i = st.take(&lengths)?;
                Ok((edges[i] + edges[i + 1]) / 2.0)
            }
        }
    }
}

impl ScriptState {
    fn take(&mut self, probs: &[f64]) -> Result<usize> {
        let i = if self.pos < self.script.len() {
            self.script[self.pos]
        } else {
            self.script.push(0);
            0
        };
        self.pos += 1;
        if i >= probs.len() {
            return Err(Error::NotEnumerable("script index out of support".into()));
        }
        self.choices.push(Choice { taken: i, support: probs.len(), log_prob: probs[i].ln() });
        Ok(i)
    }
}

/// One fully enumerated execution path: its exact log-probability and the
/// closure's output.
pub struct Path<T> {
    pub log_prob: f64,
    pub value: T,
}

/// Run `f` once per execution path of a finite discrete program, depth-first.
///
/// `f` receives a scripted stream; every discrete choice it makes through that
/// stream becomes a branch point. The sum of `exp(log_prob)` over all returned
/// paths is 1 (up to rounding) whenever `f`'s choices are normalized.
pub fn enumerate_paths<T>(mut f: impl FnMut(&mut RandomStream) -> Result<T>) -> Result<Vec<Path<T>>> {
    let mut out = Vec::new();
    let mut script: Vec<usize> = Vec::new();
    loop {
        let mut stream = RandomStream::scripted(script.clone());
        let value = f(&mut stream)?;
        let st = match stream.kind {
            Kind::Script(st) => st,
            Kind::Rng(_) => unreachable!(),
        };
        let log_prob: f64 = st.choices.iter().map(|c| c.log_prob).sum();
        out.push(Path { log_prob, value });

        // Odometer step: advance the deepest choice that still has untried
        // alternatives, dropping everything after it.
        let mut choices = st.choices;
        loop {
            match choices.pop() {
                None => return Ok(out),
                Some(c) if c.taken + 1 < c.support => {
                    script = choices.iter().map(|c| c.taken).collect();
                    script.push(c.taken + 1);
                    break;
                }
                Some(_) => {}
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seeded_streams_are_reproducible_and_distinct() {
        let mut a = RandomStream::seeded(7, 0);
        let mut b = RandomStream::seeded(7, 0);
        let mut c = RandomStream::seeded(7, 1);
        let xa = a.standard_normal(4).unwrap();
        let xb = b.standard_normal(4).unwrap();
        let xc = c.standard_normal(4).unwrap();
        assert_eq!(xa, xb);
        assert_ne!(xa, xc);
    }

    #[test]
    fn split_streams_do_not_track_parent() {
        let mut a = RandomStream::seeded(3, 0);
        let mut child1 = a.split();
        let mut child2 = a.split();
        assert_ne!(child1.standard_normal(2).unwrap(), child2.standard_normal(2).unwrap());
    }

    #[test]
    fn categorical_frequencies_follow_probs() {
        let mut rng = RandomStream::seeded(11, 0);
        let probs = [0.2, 0.5, 0.3];
        let n = 200_000;
        let mut counts = [0usize; 3];
        for _ in 0..n {
            counts[rng.categorical(&probs).unwrap()] += 1;
        }
        for i in 0..3 {
            let p_hat = counts[i] as f64 / n as f64;
            let se = (probs[i] * (1.0 - probs[i]) / n as f64).sqrt();
            assert!((p_hat - probs[i]).abs() < 4.0 * se, "component {i}: {p_hat} vs {}", probs[i]);
        }
    }

    #[test]
    fn enumeration_visits_every_path_with_exact_probability() {
        // Two dependent coins: support 2 x 2, path probs multiply.
        let paths = enumerate_paths(|rng| {
            let a = rng.categorical(&[0.25, 0.75])?;
            let b = if a == 0 { rng.categorical(&[0.5, 0.5])? } else { rng.categorical(&[0.1, 0.9])? };
            Ok((a, b))
        })
        .unwrap();
        assert_eq!(paths.len(), 4);
        let total: f64 = paths.iter().map(|p| p.log_prob.exp()).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let p01: f64 = paths
            .iter()
            .filter(|p| p.value == (0, 1))
            .map(|p| p.log_prob.exp())
            .sum();
        assert!((p01 - 0.125).abs() < 1e-12);
    }

    #[test]
    fn segmented_uniform_enumerates_segment_lengths() {
        let paths = enumerate_paths(|rng| rng.uniform_segmented(&[0.25, 0.75])).unwrap();
        assert_eq!(paths.len(), 3);
        let ps: Vec<f64> = paths.iter().map(|p| p.log_prob.exp()).collect();
        assert!((ps[0] - 0.25).abs() < 1e-12);
        assert!((ps[1] - 0.5).abs() < 1e-12);
        assert!((ps[2] - 0.25).abs() < 1e-12);
        assert!((paths[1].value - 0.5).abs() < 1e-12);
    }
}

//! Traces, density maps, and log-weight arithmetic.
//!
//! A [`Trace`] maps addresses to the *unobserved* values realized during one
//! program evaluation, in execution order. A [`DensityMap`] maps addresses to
//! per-sample log densities and additionally covers observed sites and factor
//! statements, so model densities are literal sums over its entries. All weight
//! bookkeeping is in log space throughout; `-inf` is a representable weight
//! (an off-support or zero-probability particle), never an error.
//!
//! The importance weight of an evaluation against a substituted trace `tau'`
//! sums the density entries that were either observed/factored or *reused* from
//! `tau'`; fresh draws cancel by construction. With no substitution this
//! reduces to the likelihood weight (observed terms only).

use indexmap::IndexMap;

use crate::autodiff::Value;
use crate::error::{Error, Result};

/// Flat textual site name. Hierarchical scoping is plain textual suffixing
/// ("name/suffix"); equality is exact text equality.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Debug)]
pub struct Address(String);

impl Address {
    pub fn new(name: impl Into<String>) -> Self {
        let name = name.into();
        assert!(!name.is_empty(), "addresses must be non-empty");
        Address(name)
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    /// "name/suffix" — the scoping idiom used by the sweep builders.
    pub fn suffixed(&self, suffix: impl std::fmt::Display) -> Address {
        Address(format!("{}/{}", self.0, suffix))
    }
}

impl std::fmt::Display for Address {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl From<&str> for Address {
    fn from(s: &str) -> Self {
        Address::new(s)
    }
}

impl From<String> for Address {
    fn from(s: String) -> Self {
        Address::new(s)
    }
}

fn merge_maps(a: &IndexMap<Address, Value>, b: &IndexMap<Address, Value>) -> Result<IndexMap<Address, Value>> {
    let mut out = a.clone();
    for (k, v) in b {
        if out.contains_key(k) {
            return Err(Error::AddressCollision(k.as_str().to_owned()));
        }
        out.insert(k.clone(), v.clone());
    }
    Ok(out)
}

macro_rules! addressed_map {
    ($name:ident) => {
        impl $name {
            pub fn new() -> Self {
                $name(IndexMap::new())
            }

            pub fn len(&self) -> usize {
                self.0.len()
            }

            pub fn is_empty(&self) -> bool {
                self.0.is_empty()
            }

            pub fn contains(&self, addr: &Address) -> bool {
                self.0.contains_key(addr)
            }

            pub fn get(&self, addr: &Address) -> Option<&Value> {
                self.0.get(addr)
            }

            /// Insert a fresh entry; the address must not already be present.
            pub fn insert(&mut self, addr: Address, value: Value) -> Result<()> {
                if self.0.contains_key(&addr) {
                    return Err(Error::DuplicateAddress(addr.as_str().to_owned()));
                }
                self.0.insert(addr, value);
                Ok(())
            }

            /// Entries in insertion (execution) order.
            pub fn iter(&self) -> impl Iterator<Item = (&Address, &Value)> {
                self.0.iter()
            }

            pub fn addresses(&self) -> impl Iterator<Item = &Address> {
                self.0.keys()
            }

            /// Disjoint merge: self's entries first, errors on any shared address.
            pub fn merge(&self, other: &Self) -> Result<Self> {
                Ok($name(merge_maps(&self.0, &other.0)?))
            }

            /// The same entries with all values cut loose from the tape.
            pub fn detached(&self) -> Self {
                $name(self.0.iter().map(|(a, v)| (a.clone(), v.detach())).collect())
            }

            /// Keep only the entries whose address satisfies `keep`.
            pub fn filtered(&self, keep: impl Fn(&Address) -> bool) -> Self {
                $name(self.0.iter().filter(|(a, _)| keep(a)).map(|(a, v)| (a.clone(), v.clone())).collect())
            }

            /// Reindex every entry along the leading sample dim.
            pub fn gather0(&self, idx: &std::sync::Arc<Vec<usize>>) -> Self {
                $name(self.0.iter().map(|(a, v)| (a.clone(), v.gather0(idx))).collect())
            }

            /// Content equality on values (shape + bytes), ignoring entry order
            /// and gradient history.
            pub fn content_eq(&self, other: &Self) -> bool {
                self.0.len() == other.0.len()
                    && self.0.iter().all(|(a, v)| {
                        other.0.get(a).map_or(false, |w| v.data() == w.data())
                    })
            }
        }

        impl Default for $name {
            fn default() -> Self {
                Self::new()
            }
        }

        impl std::fmt::Debug for $name {
            fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.debug_map().entries(self.0.iter().map(|(a, v)| (a.as_str(), v))).finish()
            }
        }
    };
}

/// Addressed unobserved values, in execution order.
#[derive(Clone)]
pub struct Trace(IndexMap<Address, Value>);
addressed_map!(Trace);

/// Addressed per-sample log densities (observed, unobserved, and factors).
#[derive(Clone)]
pub struct DensityMap(IndexMap<Address, Value>);
addressed_map!(DensityMap);

impl DensityMap {
    /// Sum of all entries (log of the denoted unnormalized density).
    /// Empty maps sum to the scalar 0.
    pub fn total(&self) -> Result<Value> {
        let mut acc = Value::scalar(0.0);
        for (_, v) in self.iter() {
            acc = acc.add(v)?;
        }
        Ok(acc)
    }

    /// Sum of the entries at the given addresses.
    pub fn total_over<'a>(&self, addrs: impl Iterator<Item = &'a Address>) -> Result<Value> {
        let mut acc = Value::scalar(0.0);
        for a in addrs {
            let v = self.get(a).ok_or_else(|| Error::IncompleteTrace(a.as_str().to_owned()))?;
            acc = acc.add(v)?;
        }
        Ok(acc)
    }
}

/// A per-sample importance weight in log space.
#[derive(Clone, Debug)]
pub struct LogWeight(Value);

impl LogWeight {
    pub fn zero() -> Self {
        LogWeight(Value::scalar(0.0))
    }

    pub fn new(v: Value) -> Self {
        LogWeight(v)
    }

    pub fn value(&self) -> &Value {
        &self.0
    }

    pub fn detach(&self) -> LogWeight {
        LogWeight(self.0.detach())
    }

    /// Weight product: addition in log space.
    pub fn times(&self, other: &Value) -> Result<LogWeight> {
        Ok(LogWeight(self.0.add(other)?))
    }
}

/// The full result of evaluating a program: outputs, trace, density map, and
/// the accumulated log weight.
#[derive(Clone, Debug)]
pub struct WeightedEvaluation {
    pub outputs: Vec<Value>,
    pub trace: Trace,
    pub densities: DensityMap,
    pub log_weight: LogWeight,
}

/// Likelihood weight of an evaluation with no substituted trace: the sum of
/// density entries at addresses outside the trace (observes and factors).
pub fn weight_unconditioned(rho: &DensityMap, tau: &Trace) -> Result<LogWeight> {
    let mut acc = Value::scalar(0.0);
    for (a, v) in rho.iter() {
        if !tau.contains(a) {
            acc = acc.add(v)?;
        }
    }
    Ok(LogWeight(acc))
}

/// Importance weight under a substituted trace `tau_sub`: observed/factored
/// entries plus entries whose values were reused from `tau_sub`.
pub fn weight_conditioned(rho: &DensityMap, tau: &Trace, tau_sub: &Trace) -> Result<LogWeight> {
    let mut acc = Value::scalar(0.0);
    for (a, v) in rho.iter() {
        let fresh = tau.contains(a) && !tau_sub.contains(a);
        if !fresh {
            acc = acc.add(v)?;
        }
    }
    Ok(LogWeight(acc))
}

/// log(mean(exp(w))) along `axis`, stable against -inf entries.
pub fn log_mean_exp(w: &Value, axis: usize) -> Value {
    let n = w.shape()[axis] as f64;
    w.logsumexp_axis(axis)
        .sub(&Value::scalar(n.ln()))
        .expect("scalar broadcast cannot fail")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lw(x: f64) -> Value {
        Value::scalar(x)
    }

    #[test]
    fn combine_is_disjoint_union_preserving_order() {
        let mut a = Trace::new();
        a.insert("x".into(), lw(1.0)).unwrap();
        let mut b = Trace::new();
        b.insert("y".into(), lw(2.0)).unwrap();
        let c = a.merge(&b).unwrap();
        let names: Vec<&str> = c.addresses().map(|a| a.as_str()).collect();
        assert_eq!(names, vec!["x", "y"]);
        // identity on both sides
        assert!(c.merge(&Trace::new()).unwrap().content_eq(&c));
        assert!(Trace::new().merge(&c).unwrap().content_eq(&c));
    }

    #[test]
    fn combine_rejects_shared_addresses() {
        let mut a = Trace::new();
        a.insert("x".into(), lw(1.0)).unwrap();
        let mut b = Trace::new();
        b.insert("x".into(), lw(2.0)).unwrap();
        assert!(matches!(a.merge(&b), Err(Error::AddressCollision(_))));
    }

    #[test]
    fn insert_rejects_duplicates() {
        let mut a = DensityMap::new();
        a.insert("x".into(), lw(0.0)).unwrap();
        assert!(matches!(a.insert("x".into(), lw(0.0)), Err(Error::DuplicateAddress(_))));
    }

    #[test]
    fn unconditioned_weight_is_observed_terms_only() {
        // One latent (in trace), one observe at density log 0.9.
        let mut tau = Trace::new();
        tau.insert("z".into(), lw(1.0)).unwrap();
        let mut rho = DensityMap::new();
        rho.insert("z".into(), lw(0.5_f64.ln())).unwrap();
        rho.insert("x".into(), lw(0.9_f64.ln())).unwrap();
        let w = weight_unconditioned(&rho, &tau).unwrap();
        assert!((w.value().item() - 0.9_f64.ln()).abs() < 1e-15);

        // All entries latent -> weight 1 (log 0).
        let mut rho2 = DensityMap::new();
        rho2.insert("z".into(), lw(0.5_f64.ln())).unwrap();
        let w2 = weight_unconditioned(&rho2, &tau).unwrap();
        assert_eq!(w2.value().item(), 0.0);

        // Two observes log 0.5 each -> log 0.25.
        let mut rho3 = DensityMap::new();
        rho3.insert("x1".into(), lw(0.5_f64.ln())).unwrap();
        rho3.insert("x2".into(), lw(0.5_f64.ln())).unwrap();
        let w3 = weight_unconditioned(&rho3, &Trace::new()).unwrap();
        assert!((w3.value().item() - 0.25_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conditioned_weight_counts_reused_terms() {
        // Coin model with z reused from the substituted trace:
        // rho(z) = log 0.5, rho(x) = log 0.2 -> w = log 0.1.
        let mut tau = Trace::new();
        tau.insert("z".into(), lw(0.0)).unwrap();
        let mut tau_sub = Trace::new();
        tau_sub.insert("z".into(), lw(0.0)).unwrap();
        let mut rho = DensityMap::new();
        rho.insert("z".into(), lw(0.5_f64.ln())).unwrap();
        rho.insert("x".into(), lw(0.2_f64.ln())).unwrap();
        let w = weight_conditioned(&rho, &tau, &tau_sub).unwrap();
        assert!((w.value().item() - 0.1_f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn conditioned_weight_with_empty_substitution_is_unconditioned() {
        let mut tau = Trace::new();
        tau.insert("z".into(), lw(0.0)).unwrap();
        let mut rho = DensityMap::new();
        rho.insert("z".into(), lw(0.5_f64.ln())).unwrap();
        rho.insert("x".into(), lw(0.9_f64.ln())).unwrap();
        let a = weight_conditioned(&rho, &tau, &Trace::new()).unwrap();
        let b = weight_unconditioned(&rho, &tau).unwrap();
        assert_eq!(a.value().item(), b.value().item());
    }

    #[test]
    fn log_mean_exp_frozen_values() {
        // mean(2, 4) = 3 in weight space.
        let w = Value::vector(vec![2.0_f64.ln(), 4.0_f64.ln()]);
        assert!((log_mean_exp(&w, 0).item() - 3.0_f64.ln()).abs() < 1e-12);
        // mean(1, 0) = 0.5: a -inf entry is a zero-weight particle.
        let w = Value::vector(vec![0.0, f64::NEG_INFINITY]);
        assert!((log_mean_exp(&w, 0).item() - 0.5_f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn log_mean_exp_is_shift_invariant() {
        // Property over a few magnitudes including extreme shifts.
        let base = vec![0.3, -1.2, 0.9, 2.4];
        let w = Value::vector(base.clone());
        let r0 = log_mean_exp(&w, 0).item();
        for shift in [1e3, -1e3, 700.0] {
            let shifted = Value::vector(base.iter().map(|x| x + shift).collect());
            let r = log_mean_exp(&shifted, 0).item();
            assert!((r - shift - r0).abs() < 1e-9, "shift {shift}: {r} vs {}", r0 + shift);
        }
    }

    #[test]
    fn density_total_over_missing_address_errors() {
        let rho = DensityMap::new();
        let addr: Address = "z".into();
        assert!(rho.total_over(std::iter::once(&addr)).is_err());
    }
}

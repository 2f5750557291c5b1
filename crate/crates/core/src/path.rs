//! Scattering path multiindices, the per-path bookkeeping table derived from
//! a plan, and the ordered coefficient container produced by the forward pass.

use indexmap::IndexMap;
use ndarray::Array2;

use crate::error::{Error, Result};
use crate::filterbank::FilterbankPlan;

/// The multiindex identifying one coefficient block.
///
/// Order 0 carries no filter indices. Order-1 paths index the non-spinned
/// frequential filters (the final index is the frequential low-pass branch)
/// and always have spin 0. Order-2 paths carry both a second-layer temporal
/// index and a spinned frequential index, with spin +-1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PathKey {
    pub order: u8,
    pub n2: Option<usize>,
    pub n_fr: Option<usize>,
    pub spin: i8,
    /// Second-layer dyadic scale; the stacked first-layer index has no single
    /// scale, so only `(j2, j_fr)` are materialized.
    pub j2: Option<u32>,
    pub j_fr: Option<u32>,
}

impl PathKey {
    pub fn order0() -> Self {
        PathKey {
            order: 0,
            n2: None,
            n_fr: None,
            spin: 0,
            j2: None,
            j_fr: None,
        }
    }

    pub fn order1(n_fr: usize, j_fr: u32) -> Self {
        PathKey {
            order: 1,
            n2: None,
            n_fr: Some(n_fr),
            spin: 0,
            j2: None,
            j_fr: Some(j_fr),
        }
    }

    pub fn order2(n2: usize, j2: u32, n_fr: usize, j_fr: u32, spin: i8) -> Self {
        PathKey {
            order: 2,
            n2: Some(n2),
            n_fr: Some(n_fr),
            spin,
            j2: Some(j2),
            j_fr: Some(j_fr),
        }
    }

    /// Compact human-readable form used in error messages and manifests.
    pub fn label(&self) -> String {
        match self.order {
            0 => "S0".to_string(),
            1 => format!("S1[n_fr={}]", self.n_fr.unwrap()),
            _ => format!(
                "S2[n2={}, n_fr={}, spin={}]",
                self.n2.unwrap(),
                self.n_fr.unwrap(),
                self.spin
            ),
        }
    }
}

/// Everything the pipeline and its adjoint need to know about one path:
/// strides, row occupancy, and which stages apply.
#[derive(Debug, Clone)]
pub struct PathDescriptor {
    pub key: PathKey,
    /// Occupied first-layer rows before frequential subsampling
    /// (1 for order 0).
    pub n1_max: usize,
    /// Frequential subsampling exponent applied inside frequency scattering.
    pub k_fr: u32,
    /// Temporal stride exponent of the raw block before averaging.
    pub k_time: u32,
    /// Whether a modulus nonlinearity sits between frequency scattering and
    /// averaging (false for order 0 and the order-1 low-pass branch).
    pub modulus: bool,
    /// Whether the temporal averaging filter still has to be applied.
    pub needs_time_average: bool,
    /// Whether the frequential averaging filter still has to be applied.
    pub needs_fr_average: bool,
}

/// Enumerates every coefficient path a plan produces, in emission order:
/// order 0, then the non-spinned order-1 blocks, then order-2 blocks in
/// (n2, n_fr) order. Second-layer filters admitting no first-layer path
/// (`j2 > j1` never holds) are omitted.
pub fn enumerate_paths(plan: &FilterbankPlan) -> Vec<PathDescriptor> {
    let log2_t = plan.params.log2_t;
    let log2_f = plan.params.log2_f;
    let half = plan.n_fr_positive();
    let mut out = Vec::new();

    out.push(PathDescriptor {
        key: PathKey::order0(),
        n1_max: 1,
        k_fr: 0,
        k_time: 0,
        modulus: false,
        needs_time_average: true,
        needs_fr_average: false,
    });

    for n_fr in 0..half {
        let j_fr = plan.psi_fr[n_fr].spec.j;
        out.push(PathDescriptor {
            key: PathKey::order1(n_fr, j_fr),
            n1_max: plan.psi1.len(),
            k_fr: j_fr.min(log2_f),
            k_time: log2_t,
            modulus: true,
            needs_time_average: true,
            needs_fr_average: true,
        });
    }
    // Low-pass branch: already averaged along both axes when it is emitted.
    out.push(PathDescriptor {
        key: PathKey::order1(half, log2_f),
        n1_max: plan.psi1.len(),
        k_fr: log2_f,
        k_time: log2_t,
        modulus: false,
        needs_time_average: false,
        needs_fr_average: false,
    });

    for (n2, psi2) in plan.psi2.iter().enumerate() {
        let j2 = psi2.spec.j;
        let n1_max = plan.psi1.iter().filter(|p| p.spec.j < j2).count();
        if n1_max == 0 {
            continue;
        }
        for (n_fr, psi_fr) in plan.psi_fr.iter().enumerate() {
            let j_fr = psi_fr.spec.j;
            out.push(PathDescriptor {
                key: PathKey::order2(n2, j2, n_fr, j_fr, psi_fr.spec.spin),
                n1_max,
                k_fr: j_fr.min(log2_f),
                k_time: j2.min(log2_t),
                modulus: true,
                needs_time_average: true,
                needs_fr_average: true,
            });
        }
    }
    out
}

/// Final (unpadded) shape of one path's coefficient block.
pub fn output_shape(plan: &FilterbankPlan, desc: &PathDescriptor) -> (usize, usize) {
    let t = 1usize << plan.params.log2_t;
    let f = 1usize << plan.params.log2_f;
    let cols = plan.params.n_input.div_ceil(t);
    let rows = if desc.key.order == 0 {
        1
    } else {
        desc.n1_max.div_ceil(f)
    };
    (rows, cols)
}

/// One coefficient block plus the row occupancy needed for unpadding.
#[derive(Debug, Clone)]
pub struct CoefficientEntry {
    pub data: Array2<f64>,
    pub n1_max: usize,
}

/// Ordered map from [`PathKey`] to a real matrix indexed by
/// (log-frequency bin, time frame), at strides `2^log2_f` and `2^log2_t`.
#[derive(Debug, Clone)]
pub struct CoefficientSet {
    pub entries: IndexMap<PathKey, CoefficientEntry>,
    pub log2_t: u32,
    pub log2_f: u32,
    pub plan_fingerprint: String,
}

impl CoefficientSet {
    /// Squared Frobenius norm over the selected orders.
    pub fn norm_sqr_orders(&self, orders: &[u8]) -> f64 {
        self.entries
            .iter()
            .filter(|(k, _)| orders.contains(&k.order))
            .map(|(_, e)| e.data.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    pub fn norm_sqr(&self) -> f64 {
        self.norm_sqr_orders(&[0, 1, 2])
    }

    /// Total number of coefficients across all paths.
    pub fn coefficient_count(&self) -> usize {
        self.entries.values().map(|e| e.data.len()).sum()
    }

    /// Checks that `other` has the same paths with the same shapes, naming the
    /// first differing path otherwise.
    pub fn check_compatible(&self, other: &CoefficientSet) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(Error::Incompatible(format!(
                "path counts differ: {} vs {}",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for ((ka, ea), (kb, eb)) in self.entries.iter().zip(other.entries.iter()) {
            if ka != kb {
                return Err(Error::Incompatible(format!(
                    "paths diverge at {} vs {}",
                    ka.label(),
                    kb.label()
                )));
            }
            if ea.data.dim() != eb.data.dim() {
                return Err(Error::Incompatible(format!(
                    "shape mismatch at {}: {:?} vs {:?}",
                    ka.label(),
                    ea.data.dim(),
                    eb.data.dim()
                )));
            }
        }
        Ok(())
    }
}

/// Relative L2 distance `|a - b| / |a|` over every coefficient in both sets.
pub fn relative_distance(a: &CoefficientSet, b: &CoefficientSet) -> Result<f64> {
    a.check_compatible(b)?;
    let mut num = 0.0;
    let mut den = 0.0;
    for (ea, eb) in a.entries.values().zip(b.entries.values()) {
        for (x, y) in ea.data.iter().zip(eb.data.iter()) {
            num += (x - y) * (x - y);
            den += x * x;
        }
    }
    Ok((num / den.max(f64::MIN_POSITIVE)).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::filterbank::{build_plan, PlanParams};

    fn desk_plan() -> FilterbankPlan {
        build_plan(PlanParams {
            j: 5,
            q1: 2,
            q2: 1,
            j_fr: 3,
            q_fr: 1,
            log2_t: 3,
            log2_f: 1,
            n_input: 1 << 10,
        })
        .unwrap()
    }

    #[test]
    fn path_enumeration_structure() {
        let plan = desk_plan();
        let paths = enumerate_paths(&plan);
        let half = plan.n_fr_positive();

        assert_eq!(paths[0].key.order, 0);
        let order1: Vec<&PathDescriptor> =
            paths.iter().filter(|p| p.key.order == 1).collect();
        assert_eq!(order1.len(), half + 1);
        for p in &order1 {
            assert_eq!(p.key.spin, 0);
            assert!(p.key.n2.is_none());
        }
        assert!(!order1.last().unwrap().modulus);

        for p in paths.iter().filter(|p| p.key.order == 2) {
            assert!(p.key.spin == 1 || p.key.spin == -1);
            assert!(p.n1_max > 0);
            let j2 = p.key.j2.unwrap();
            let admissible = plan.psi1.iter().filter(|f| f.spec.j < j2).count();
            assert_eq!(p.n1_max, admissible);
        }
    }

    #[test]
    fn order2_admissibility_is_exact() {
        let plan = desk_plan();
        let paths = enumerate_paths(&plan);
        let n2_present: Vec<usize> = paths
            .iter()
            .filter(|p| p.key.order == 2)
            .filter_map(|p| p.key.n2)
            .collect();
        for (n2, psi2) in plan.psi2.iter().enumerate() {
            let admissible = plan.psi1.iter().any(|f| f.spec.j < psi2.spec.j);
            assert_eq!(n2_present.contains(&n2), admissible, "n2={n2}");
        }
        // Every present n2 appears once per spinned frequential filter.
        for n2 in n2_present.iter().collect::<std::collections::HashSet<_>>() {
            let count = n2_present.iter().filter(|&v| v == n2).count();
            assert_eq!(count, plan.psi_fr.len());
        }
    }

    #[test]
    fn keys_are_unique() {
        let plan = desk_plan();
        let paths = enumerate_paths(&plan);
        let mut seen = std::collections::HashSet::new();
        for p in &paths {
            assert!(seen.insert(p.key), "duplicate {:?}", p.key);
        }
    }

    #[test]
    fn output_shapes() {
        let plan = desk_plan();
        for desc in enumerate_paths(&plan) {
            let (rows, cols) = output_shape(&plan, &desc);
            assert_eq!(cols, 128); // 1024 / 2^3
            if desc.key.order == 0 {
                assert_eq!(rows, 1);
            } else {
                assert_eq!(rows, desc.n1_max.div_ceil(2));
            }
        }
    }
}

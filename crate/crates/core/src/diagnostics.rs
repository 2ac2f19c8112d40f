//! Dataset-level routing profiles: dispersion, concentration and
//! family/modality marginals of the mean routing vector.

use serde::{Deserialize, Serialize};

use crate::autograd::entropy;
use crate::error::{MagnetError, Result};
use crate::moe::{Family, Group};
use crate::model::Model;
use crate::model::Frozen;
use crate::scalar::Scalar;

const PAIR_CHUNK: usize = 8192;

/// Mean dense routing over `pairs`.
pub fn aggregate_routing<T: Scalar>(model: &Model<T>, frozen: &Frozen<T>, pairs: &[(usize, usize)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(MagnetError::Empty("no pairs to aggregate routing over".into()));
    }
    if !model.routed() {
        return Err(MagnetError::Parameter("model has no router".into()));
    }
    let mut scorer = model.scorer(frozen);
    let mut sum = vec![0.0; model.experts()];
    for chunk in pairs.chunks(PAIR_CHUNK) {
        let (us, is): (Vec<usize>, Vec<usize>) = chunk.iter().copied().unzip();
        let pi = scorer.score(&us, &is)?.pi.expect("routed model returns routing");
        for r in 0..pi.rows() {
            for (s, &p) in sum.iter_mut().zip(pi.row(r)) {
                *s += p.f64();
            }
        }
    }
    Ok(sum.into_iter().map(|s| s / pairs.len() as f64).collect())
}

/// Arithmetic mean of explicit routing rows.
pub fn mean_routing<'a>(rows: impl IntoIterator<Item = &'a [f64]>) -> Result<Vec<f64>> {
    let mut sum: Vec<f64> = Vec::new();
    let mut n = 0usize;
    for r in rows {
        if sum.is_empty() {
            sum = vec![0.0; r.len()];
        }
        for (s, &p) in sum.iter_mut().zip(r) {
            *s += p;
        }
        n += 1;
    }
    if n == 0 {
        return Err(MagnetError::Empty("no routings".into()));
    }
    Ok(sum.into_iter().map(|s| s / n as f64).collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingProfile {
    pub mean: Vec<f64>,
    pub h: f64,
    pub h_norm: f64,
    pub n_eff: f64,
    pub hhi: f64,
    pub div: f64,
    /// `[Dom, Bal, Com]`.
    pub family_mass: [f64; 3],
    /// `[B, A, S]` by expert anchor group.
    pub modality_mass: [f64; 3],
    /// `[B, A, S]` weighted by each expert's triplet.
    pub triplet_mass: [f64; 3],
    /// Anchor-group mass on A + S.
    pub content_participation: f64,
    pub winner_share: f64,
    /// HHI rescaled to `[0, 1]` between uniform and one-hot.
    pub concentration: f64,
}

/// Closed-form profile of `mean` given each expert's group, family and
/// triplet.
pub fn routing_diagnostics(mean: &[f64], groups: &[Group], families: &[Family], triplets: &[[f64; 3]]) -> Result<RoutingProfile> {
    let e = mean.len();
    if e == 0 || groups.len() != e || families.len() != e || triplets.len() != e {
        return Err(MagnetError::Shape(format!(
            "routing over {e} experts with {} groups, {} families, {} triplets",
            groups.len(),
            families.len(),
            triplets.len()
        )));
    }
    let h = entropy(mean).max(0.0);
    let div = if e > 1 { (h / (e as f64).ln()).clamp(0.0, 1.0) } else { 0.0 };
    let hhi: f64 = mean.iter().map(|p| p * p).sum();
    let mut family_mass = [0.0; 3];
    let mut modality_mass = [0.0; 3];
    let mut triplet_mass = [0.0; 3];
    for k in 0..e {
        family_mass[families[k].index()] += mean[k];
        modality_mass[groups[k].index()] += mean[k];
        for (t, w) in triplet_mass.iter_mut().zip(triplets[k]) {
            *t += mean[k] * w;
        }
    }
    let uniform = 1.0 / e as f64;
    let concentration = if e > 1 { (hhi - uniform) / (1.0 - uniform) } else { 1.0 };
    Ok(RoutingProfile {
        mean: mean.to_vec(),
        h,
        h_norm: div,
        n_eff: h.exp(),
        hhi,
        div,
        family_mass,
        modality_mass,
        triplet_mass,
        content_participation: modality_mass[1] + modality_mass[2],
        winner_share: mean.iter().copied().fold(0.0, f64::max),
        concentration,
    })
}

pub fn model_profile<T: Scalar>(model: &Model<T>, mean: &[f64]) -> Result<RoutingProfile> {
    let groups: Vec<Group> = model.pool.specs.iter().map(|s| s.group).collect();
    let families: Vec<Family> = model.pool.specs.iter().map(|s| s.family).collect();
    let triplets: Vec<[f64; 3]> = (0..model.experts()).map(|e| model.triplet(e)).collect();
    routing_diagnostics(mean, &groups, &families, &triplets)
}

pub const CSV_HEADER: &str =
    "H,H_norm,N_eff,HHI,Div,mass_B,mass_A,mass_S,mass_Dom,mass_Bal,mass_Com,winner_share,concentration,tmass_B,tmass_A,tmass_S,label";

impl RoutingProfile {
    pub fn csv_row(&self, label: &str) -> String {
        let v = [
            self.h,
            self.h_norm,
            self.n_eff,
            self.hhi,
            self.div,
            self.modality_mass[0],
            self.modality_mass[1],
            self.modality_mass[2],
            self.family_mass[0],
            self.family_mass[1],
            self.family_mass[2],
            self.winner_share,
            self.concentration,
            self.triplet_mass[0],
            self.triplet_mass[1],
            self.triplet_mass[2],
        ];
        let mut row: Vec<String> = v.iter().map(|x| x.to_string()).collect();
        row.push(label.to_string());
        row.join(",")
    }
}

//! Practice clustering and farm classification.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{Diagnostic, Household, ModelInstance, Practice, ProductCategory, ProductId};

pub const SMALL_FARM_MAX: f64 = 400_000.0;
pub const MEDIUM_FARM_MAX: f64 = 850_000.0;
pub const SPECIALIZATION_SHARE: f64 = 0.65;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Petite,
    Moyenne,
    Grande,
}

impl SizeClass {
    pub const ALL: [SizeClass; 3] = [SizeClass::Petite, SizeClass::Moyenne, SizeClass::Grande];

    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Petite => "petite",
            SizeClass::Moyenne => "moyenne",
            SizeClass::Grande => "grande",
        }
    }

    /// Both ends of the middle band belong to `Moyenne`.
    pub fn from_value(value: f64) -> SizeClass {
        if value < SMALL_FARM_MAX {
            SizeClass::Petite
        } else if value <= MEDIUM_FARM_MAX {
            SizeClass::Moyenne
        } else {
            SizeClass::Grande
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Specialization {
    Vivrier,
    Rente,
    CerealesLegumineuses,
    Mixte,
}

impl Specialization {
    pub const ALL: [Specialization; 4] = [
        Specialization::Vivrier,
        Specialization::Rente,
        Specialization::CerealesLegumineuses,
        Specialization::Mixte,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Specialization::Vivrier => "vivrier",
            Specialization::Rente => "rente",
            Specialization::CerealesLegumineuses => "cereales_legumineuses",
            Specialization::Mixte => "mixte",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FarmClass {
    pub size: SizeClass,
    pub specialization: Specialization,
    pub economic_value: f64,
}

/// Specialization from economic value per product category.
///
/// Rules are tried in order: food crops, cash crops, cereals with legumes,
/// and finally mixed.
pub fn specialization_from_values(values: &BTreeMap<ProductCategory, f64>) -> Result<Specialization> {
    let total: f64 = values.values().sum();
    if total <= 0.0 {
        return Err(Error::InvalidInput("zero total economic value".into()));
    }
    let share = |cats: &[ProductCategory]| -> f64 {
        cats.iter().map(|c| values.get(c).copied().unwrap_or(0.0)).sum::<f64>() / total
    };
    let reaches = |s: f64| s >= SPECIALIZATION_SHARE - 1e-12;
    use ProductCategory::*;
    Ok(if reaches(share(&[Cereal, RootTuber])) {
        Specialization::Vivrier
    } else if reaches(share(&[Legume, CashHorticulture, CashOther])) {
        Specialization::Rente
    } else if reaches(share(&[Cereal, Legume])) {
        Specialization::CerealesLegumineuses
    } else {
        Specialization::Mixte
    })
}

/// Value of observed production at market prices, per product category.
pub fn category_values(household: &Household, model: &ModelInstance) -> BTreeMap<ProductCategory, f64> {
    let categories: BTreeMap<&ProductId, ProductCategory> =
        model.products.iter().map(|p| (&p.id, p.category)).collect();
    let mut out = BTreeMap::new();
    for (id, level) in &household.observed_levels {
        let Some(act) = model.activity(id) else { continue };
        let price = model.prices.product(&act.product).map(|p| p.market).unwrap_or(0.0);
        let Some(cat) = categories.get(&act.product) else { continue };
        *out.entry(*cat).or_insert(0.0) += level * act.yield_per_ha * price;
    }
    out
}

pub fn economic_value(household: &Household, model: &ModelInstance) -> f64 {
    category_values(household, model).values().sum()
}

pub fn economic_size(household: &Household, model: &ModelInstance) -> (SizeClass, f64) {
    let value = economic_value(household, model);
    (SizeClass::from_value(value), value)
}

pub fn specialization(household: &Household, model: &ModelInstance) -> Result<Specialization> {
    specialization_from_values(&category_values(household, model))
}

/// Size and specialization; households without production are `Mixte`.
pub fn classify_farm(household: &Household, model: &ModelInstance) -> FarmClass {
    let values = category_values(household, model);
    let value: f64 = values.values().sum();
    FarmClass {
        size: SizeClass::from_value(value),
        specialization: specialization_from_values(&values).unwrap_or(Specialization::Mixte),
        economic_value: value,
    }
}

/// Expenditures per ha of one plot, in the order seed, fertilizer, phyto,
/// equipment, hired labor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PracticeObservation {
    pub plot_id: String,
    pub crop: ProductId,
    pub expenditures: [f64; 5],
}

impl PracticeObservation {
    pub fn total(&self) -> f64 {
        self.expenditures.iter().sum()
    }
}

/// One agglomeration step: clusters `a` and `b` joined at `height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    pub height: f64,
}

/// Ward linkage on Euclidean distance by the nearest-neighbor chain.
///
/// Returns `n - 1` merges between original point indices (each merge names
/// one representative point of either side), sorted by height.
pub fn ward_linkage(points: &[Vec<f64>]) -> Vec<Merge> {
    let n = points.len();
    if n < 2 {
        return Vec::new();
    }
    let idx = |i: usize, j: usize| -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * n - i * (i + 1) / 2 + (j - i - 1)
    };
    // Squared distances; Ward updates stay in squared space.
    let mut dist = vec![0.0; n * (n - 1) / 2];
    for i in 0..n {
        for j in i + 1..n {
            dist[idx(i, j)] = points[i]
                .iter()
                .zip(&points[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    }
    let mut size = vec![1usize; n];
    let mut active = vec![true; n];
    let mut merges = Vec::with_capacity(n - 1);
    let mut chain: Vec<usize> = Vec::new();
    let mut remaining = n;
    while remaining > 1 {
        if chain.is_empty() {
            chain.push((0..n).find(|&i| active[i]).expect("active cluster"));
        }
        loop {
            let a = *chain.last().expect("non-empty chain");
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            // Prefer the previous chain element on ties so the chain terminates.
            let mut best = prev;
            let mut best_d = prev.map(|p| dist[idx(a, p)]).unwrap_or(f64::INFINITY);
            for k in 0..n {
                if !active[k] || k == a {
                    continue;
                }
                let d = dist[idx(a, k)];
                if d < best_d {
                    best_d = d;
                    best = Some(k);
                }
            }
            let b = best.expect("another active cluster");
            if Some(b) == prev {
                chain.pop();
                chain.pop();
                let (keep, gone) = if a < b { (a, b) } else { (b, a) };
                let (na, nb) = (size[keep] as f64, size[gone] as f64);
                let dab = dist[idx(keep, gone)];
                for k in 0..n {
                    if !active[k] || k == keep || k == gone {
                        continue;
                    }
                    let nk = size[k] as f64;
                    let d = ((na + nk) * dist[idx(keep, k)] + (nb + nk) * dist[idx(gone, k)]
                        - nk * dab)
                        / (na + nb + nk);
                    dist[idx(keep, k)] = d.max(0.0);
                }
                active[gone] = false;
                size[keep] += size[gone];
                remaining -= 1;
                merges.push(Merge {
                    a: keep,
                    b: gone,
                    height: dab.max(0.0).sqrt(),
                });
                break;
            }
            chain.push(b);
        }
    }
    // Stable sort keeps the discovery order among equal heights.
    merges.sort_by(|x, y| x.height.total_cmp(&y.height));
    merges
}

/// Cluster labels `0..k` after undoing the `k - 1` highest merges.
pub fn cut_tree(n: usize, merges: &[Merge], k: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut [usize], mut x: usize) -> usize {
        while parent[x] != x {
            parent[x] = parent[parent[x]];
            x = parent[x];
        }
        x
    }
    let keep = n.saturating_sub(k.max(1));
    for m in merges.iter().take(keep) {
        let (ra, rb) = (find(&mut parent, m.a), find(&mut parent, m.b));
        if ra != rb {
            parent[ra.max(rb)] = ra.min(rb);
        }
    }
    let mut labels = vec![0; n];
    let mut ids: BTreeMap<usize, usize> = BTreeMap::new();
    for (i, label) in labels.iter_mut().enumerate() {
        let r = find(&mut parent, i);
        let next = ids.len();
        *label = *ids.entry(r).or_insert(next);
    }
    labels
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PracticeLabels {
    pub labels: BTreeMap<String, Practice>,
    pub diagnostics: Vec<Diagnostic>,
}

fn zscores(rows: &[&PracticeObservation]) -> Vec<Vec<f64>> {
    let n = rows.len() as f64;
    let mut out: Vec<Vec<f64>> = rows.iter().map(|r| r.expenditures.to_vec()).collect();
    for v in 0..5 {
        let mean = rows.iter().map(|r| r.expenditures[v]).sum::<f64>() / n;
        let var = rows
            .iter()
            .map(|r| (r.expenditures[v] - mean).powi(2))
            .sum::<f64>()
            / n;
        let sd = var.sqrt();
        for row in out.iter_mut() {
            row[v] = if sd > 0.0 { (row[v] - mean) / sd } else { 0.0 };
        }
    }
    out
}

/// Label the plots of a single crop.
pub fn classify_crop(observations: &[PracticeObservation], n_clusters: usize) -> Result<PracticeLabels> {
    if n_clusters == 0 || observations.len() < n_clusters {
        return Err(Error::InvalidInput(format!(
            "{} observations for {} clusters",
            observations.len(),
            n_clusters
        )));
    }
    if let Some(o) = observations.iter().find(|o| o.expenditures.iter().any(|v| *v < 0.0)) {
        return Err(Error::InvalidInput(format!("plot {}: negative expenditure", o.plot_id)));
    }
    let mut rows: Vec<&PracticeObservation> = observations.iter().collect();
    rows.sort_by(|a, b| a.plot_id.cmp(&b.plot_id));
    let points = zscores(&rows);
    let mut out = PracticeLabels::default();
    if points.iter().all(|p| p.iter().all(|v| *v == 0.0)) {
        for r in &rows {
            out.labels.insert(r.plot_id.clone(), Practice::Extensive);
        }
        let crop = rows.first().map(|r| r.crop.to_string()).unwrap_or_default();
        out.diagnostics.push(Diagnostic::new(
            format!("crop {crop}"),
            "identical expenditure profiles; single cluster labeled extensive",
        ));
        return Ok(out);
    }
    let merges = ward_linkage(&points);
    let labels = cut_tree(rows.len(), &merges, n_clusters);
    let k = labels.iter().max().map(|m| m + 1).unwrap_or(0);
    let mut totals = vec![(0.0, 0usize); k];
    for (r, l) in rows.iter().zip(&labels) {
        totals[*l].0 += r.total();
        totals[*l].1 += 1;
    }
    let extensive = (0..k)
        .min_by(|a, b| {
            let ma = totals[*a].0 / totals[*a].1 as f64;
            let mb = totals[*b].0 / totals[*b].1 as f64;
            ma.total_cmp(&mb)
        })
        .unwrap_or(0);
    for (r, l) in rows.iter().zip(&labels) {
        let practice = if *l == extensive {
            Practice::Extensive
        } else {
            Practice::SemiIntensive
        };
        out.labels.insert(r.plot_id.clone(), practice);
    }
    Ok(out)
}

/// Label every plot, clustering each crop separately.
///
/// Crops with fewer plots than clusters are labeled extensive with a
/// diagnostic rather than failing the whole run.
pub fn classify_practices(observations: &[PracticeObservation], n_clusters: usize) -> PracticeLabels {
    let mut by_crop: BTreeMap<&ProductId, Vec<PracticeObservation>> = BTreeMap::new();
    for o in observations {
        by_crop.entry(&o.crop).or_default().push(o.clone());
    }
    let results: Vec<(String, Result<PracticeLabels>, Vec<String>)> = by_crop
        .into_iter()
        .map(|(crop, obs)| {
            let ids = obs.iter().map(|o| o.plot_id.clone()).collect();
            (crop.to_string(), classify_crop(&obs, n_clusters), ids)
        })
        .collect();
    let mut out = PracticeLabels::default();
    for (crop, res, ids) in results {
        match res {
            Ok(l) => {
                out.labels.extend(l.labels);
                out.diagnostics.extend(l.diagnostics);
            }
            Err(e) => {
                for id in ids {
                    out.labels.insert(id, Practice::Extensive);
                }
                out.diagnostics
                    .push(Diagnostic::new(format!("crop {crop}"), format!("{e}; labeled extensive")));
            }
        }
    }
    out.diagnostics.sort();
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn obs(id: &str, e: [f64; 5]) -> PracticeObservation {
        PracticeObservation {
            plot_id: id.into(),
            crop: "mil".into(),
            expenditures: e,
        }
    }

    #[test]
    fn size_thresholds() {
        assert_eq!(SizeClass::from_value(350_000.0), SizeClass::Petite);
        assert_eq!(SizeClass::from_value(0.0), SizeClass::Petite);
        assert_eq!(SizeClass::from_value(400_000.0), SizeClass::Moyenne);
        assert_eq!(SizeClass::from_value(850_000.0), SizeClass::Moyenne);
        assert_eq!(SizeClass::from_value(850_001.0), SizeClass::Grande);
    }

    fn values(pairs: &[(ProductCategory, f64)]) -> BTreeMap<ProductCategory, f64> {
        pairs.iter().copied().collect()
    }

    #[test]
    fn specialization_rules() {
        use ProductCategory::*;
        let v = values(&[(Cereal, 0.70), (CashOther, 0.30)]);
        assert_eq!(specialization_from_values(&v).unwrap(), Specialization::Vivrier);
        let v = values(&[(Cereal, 0.40), (Legume, 0.40), (CashHorticulture, 0.20)]);
        assert_eq!(
            specialization_from_values(&v).unwrap(),
            Specialization::CerealesLegumineuses
        );
        let v = values(&[(Cereal, 0.25), (Legume, 0.25), (CashOther, 0.25), (RootTuber, 0.25)]);
        assert_eq!(specialization_from_values(&v).unwrap(), Specialization::Mixte);
        assert!(specialization_from_values(&BTreeMap::new()).is_err());
    }

    /// Brute-force restatement of the rule order over a share grid.
    #[test]
    fn specialization_rule_order_grid() {
        use ProductCategory::*;
        let step = 0.05;
        let steps = 20;
        for a in 0..=steps {
            for b in 0..=steps - a {
                for c in 0..=steps - a - b {
                    let d = steps - a - b - c;
                    let (cer, root, leg, cash) = (
                        a as f64 * step,
                        b as f64 * step,
                        c as f64 * step,
                        d as f64 * step,
                    );
                    let v = values(&[(Cereal, cer), (RootTuber, root), (Legume, leg), (CashOther, cash)]);
                    let expected = if cer + root >= 0.65 - 1e-9 {
                        Specialization::Vivrier
                    } else if leg + cash >= 0.65 - 1e-9 {
                        Specialization::Rente
                    } else if cer + leg >= 0.65 - 1e-9 {
                        Specialization::CerealesLegumineuses
                    } else {
                        Specialization::Mixte
                    };
                    assert_eq!(specialization_from_values(&v).unwrap(), expected);
                }
            }
        }
    }

    #[test]
    fn separated_groups() {
        let mut o = Vec::new();
        for i in 0..10 {
            let f = i as f64;
            o.push(obs(&format!("a{i}"), [1000.0 + f, 800.0, 300.0, 500.0, 400.0 + f]));
            o.push(obs(&format!("b{i}"), [25_000.0 + f, 15_000.0, 5_000.0, 9_000.0, 6_000.0 - f]));
        }
        let l = classify_crop(&o, 2).unwrap();
        for i in 0..10 {
            assert_eq!(l.labels[&format!("a{i}")], Practice::Extensive);
            assert_eq!(l.labels[&format!("b{i}")], Practice::SemiIntensive);
        }
    }

    #[test]
    fn identical_observations() {
        let o: Vec<_> = (0..4).map(|i| obs(&format!("p{i}"), [1.0, 2.0, 3.0, 4.0, 5.0])).collect();
        let l = classify_crop(&o, 2).unwrap();
        assert!(l.labels.values().all(|p| *p == Practice::Extensive));
        assert_eq!(l.diagnostics.len(), 1);
    }

    #[test]
    fn too_few_observations() {
        assert!(classify_crop(&[obs("p", [1.0; 5])], 2).is_err());
    }

    #[test]
    fn ward_heights_match_definition() {
        // Two points at distance 2, third far away: first merge height is 2,
        // Ward height of joining {0,1} with point 2 is sqrt(2*1*2/3)*dist.
        let pts = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![1.0, 10.0]];
        let m = ward_linkage(&pts);
        assert_eq!(m.len(), 2);
        assert!((m[0].height - 2.0).abs() < 1e-12);
        let centroid_gap = 10.0f64;
        let expected = (2.0 * 2.0 * 1.0 / 3.0 * centroid_gap * centroid_gap).sqrt();
        assert!((m[1].height - expected).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn permutation_invariant(
            rows in proptest::collection::vec(proptest::collection::vec(0.0f64..100.0, 5), 3..25),
            seed in any::<u64>(),
        ) {
            let o: Vec<_> = rows
                .iter()
                .enumerate()
                .map(|(i, r)| obs(&format!("p{i:03}"), [r[0], r[1], r[2], r[3], r[4]]))
                .collect();
            let mut shuffled = o.clone();
            let mut s = seed;
            for i in (1..shuffled.len()).rev() {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                let j = (s >> 33) as usize % (i + 1);
                shuffled.swap(i, j);
            }
            prop_assert_eq!(classify_crop(&o, 2).unwrap(), classify_crop(&shuffled, 2).unwrap());
        }

        #[test]
        fn size_class_monotone(a in 0.0f64..2e6, b in 0.0f64..2e6) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(SizeClass::from_value(lo) <= SizeClass::from_value(hi));
        }
    }
}

//! Shared domain vocabulary.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use serde::{Deserialize, Serialize};

macro_rules! string_id {
    ($(#[$meta:meta])* $name:ident) => {
        $(#[$meta])*
        #[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
        #[serde(transparent)]
        pub struct $name(pub String);

        impl $name {
            pub fn as_str(&self) -> &str {
                &self.0
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.0)
            }
        }

        impl From<&str> for $name {
            fn from(s: &str) -> Self {
                $name(s.to_owned())
            }
        }

        impl From<String> for $name {
            fn from(s: String) -> Self {
                $name(s)
            }
        }
    };
}

string_id!(
    /// Survey household identifier.
    HouseholdId
);
string_id!(ActivityId);
string_id!(ProductId);
string_id!(RegionId);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProductCategory {
    Cereal,
    RootTuber,
    Legume,
    CashHorticulture,
    CashOther,
}

impl ProductCategory {
    pub const ALL: [ProductCategory; 5] = [
        ProductCategory::Cereal,
        ProductCategory::RootTuber,
        ProductCategory::Legume,
        ProductCategory::CashHorticulture,
        ProductCategory::CashOther,
    ];
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Product {
    pub id: ProductId,
    pub name: String,
    pub category: ProductCategory,
    pub tradable: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Practice {
    Extensive,
    SemiIntensive,
}

impl Practice {
    pub fn suffix(self) -> &'static str {
        match self {
            Practice::Extensive => "ext",
            Practice::SemiIntensive => "semi",
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Season {
    #[default]
    Rainy,
    Dry,
}

impl Season {
    pub const ALL: [Season; 2] = [Season::Rainy, Season::Dry];

    pub fn as_str(self) -> &'static str {
        match self {
            Season::Rainy => "rainy",
            Season::Dry => "dry",
        }
    }
}

/// A quantity held separately for each season.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerSeason {
    pub rainy: f64,
    pub dry: f64,
}

impl PerSeason {
    pub fn new(rainy: f64, dry: f64) -> Self {
        PerSeason { rainy, dry }
    }

    pub fn get(&self, season: Season) -> f64 {
        match season {
            Season::Rainy => self.rainy,
            Season::Dry => self.dry,
        }
    }

    pub fn get_mut(&mut self, season: Season) -> &mut f64 {
        match season {
            Season::Rainy => &mut self.rainy,
            Season::Dry => &mut self.dry,
        }
    }
}

/// Per-hectare variable costs in FCFA.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct InputCosts {
    pub seed: f64,
    pub fertilizer: f64,
    pub phyto: f64,
    pub equipment: f64,
    pub hired_labor: f64,
    pub other: f64,
}

impl InputCosts {
    pub fn total(&self) -> f64 {
        self.seed + self.fertilizer + self.phyto + self.equipment + self.hired_labor + self.other
    }

    /// All items except fertilizer, which the household model prices through
    /// quota tranches instead.
    pub fn non_fertilizer(&self) -> f64 {
        self.total() - self.fertilizer
    }

    /// Cash outlays other than fertilizer. Equipment (depreciation and upkeep)
    /// and `other` are not counted against working capital.
    pub fn cash_non_fertilizer(&self) -> f64 {
        self.seed + self.phyto + self.hired_labor
    }

    pub fn scaled(&self, factor: f64) -> InputCosts {
        InputCosts {
            seed: self.seed * factor,
            fertilizer: self.fertilizer * factor,
            phyto: self.phyto * factor,
            equipment: self.equipment * factor,
            hired_labor: self.hired_labor * factor,
            other: self.other * factor,
        }
    }

    pub fn items(&self) -> [(&'static str, f64); 6] {
        [
            ("seed", self.seed),
            ("fertilizer", self.fertilizer),
            ("phyto", self.phyto),
            ("equipment", self.equipment),
            ("hired_labor", self.hired_labor),
            ("other", self.other),
        ]
    }
}

/// A crop grown with a given practice in a given season.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Activity {
    pub id: ActivityId,
    pub product: ProductId,
    pub practice: Practice,
    pub season: Season,
    /// kg per ha
    pub yield_per_ha: f64,
    pub input_costs: InputCosts,
    /// kg of fertilizer per ha
    pub fertilizer_qty: f64,
    /// person-days per ha in the activity's season
    pub labor_req: f64,
    pub subsidy_eligible_fertilizer: bool,
    /// Coupled production subsidy, FCFA per ha.
    #[serde(default)]
    pub production_subsidy: f64,
}

impl Activity {
    pub fn standard_id(product: &ProductId, practice: Practice, season: Season) -> ActivityId {
        ActivityId(format!("{}_{}_{}", product, practice.suffix(), season.as_str()))
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Household {
    pub id: HouseholdId,
    pub region: RegionId,
    /// Survey expansion factor.
    pub weight: f64,
    /// ha per season
    pub land: PerSeason,
    /// person-days per season
    pub labor: PerSeason,
    /// Working capital available for cash input purchases, FCFA.
    pub cash_endowment: f64,
    pub exog_income: f64,
    pub observed_levels: BTreeMap<ActivityId, f64>,
    pub observed_consumption: BTreeMap<ProductId, f64>,
    pub adult_equivalents: f64,
    /// Received subsidized fertilizer in the base year.
    pub base_beneficiary: bool,
}

impl Household {
    pub fn cultivated_area(&self) -> f64 {
        self.observed_levels.values().sum()
    }

    pub fn consumption(&self, product: &ProductId) -> f64 {
        self.observed_consumption.get(product).copied().unwrap_or(0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProductPrice {
    /// FCFA per kg
    pub market: f64,
    /// Multiplicative factor paid by buyers, >= 1.
    pub buy_markup: f64,
    /// Multiplicative factor received by sellers, <= 1.
    pub sell_markdown: f64,
}

impl ProductPrice {
    pub fn buy(&self) -> f64 {
        self.market * self.buy_markup
    }

    pub fn sell(&self) -> f64 {
        self.market * self.sell_markdown
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PriceSystem {
    pub products: BTreeMap<ProductId, ProductPrice>,
    pub fertilizer_market_price: f64,
    pub factor_prices: BTreeMap<String, f64>,
}

impl PriceSystem {
    pub fn product(&self, id: &ProductId) -> Option<&ProductPrice> {
        self.products.get(id)
    }
}

/// Diagonal-by-default quadratic behavioral cost `(d + 0.5 Q x) x`.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct BehavioralFunction {
    pub linear: BTreeMap<ActivityId, f64>,
    pub quadratic: BTreeMap<(ActivityId, ActivityId), f64>,
}

impl BehavioralFunction {
    pub fn d(&self, id: &ActivityId) -> f64 {
        self.linear.get(id).copied().unwrap_or(0.0)
    }

    pub fn q(&self, a: &ActivityId, b: &ActivityId) -> f64 {
        self.quadratic
            .get(&(a.clone(), b.clone()))
            .copied()
            .unwrap_or(0.0)
    }

    pub fn q_diag(&self, id: &ActivityId) -> f64 {
        self.q(id, id)
    }

    pub fn set_diag(&mut self, id: &ActivityId, value: f64) {
        self.quadratic.insert((id.clone(), id.clone()), value);
    }

    pub fn is_symmetric(&self) -> bool {
        self.quadratic.iter().all(|((a, b), v)| {
            let mirror = self.q(b, a);
            (mirror - v).abs() <= 1e-12 * v.abs().max(1.0)
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Eligibility {
    All,
    AreaLeq {
        threshold_ha: OrderedHa,
    },
    Listed {
        ids: BTreeSet<HouseholdId>,
    },
    None,
}

/// Hectare threshold stored as thousandths of a hectare so the eligibility
/// predicate stays `Eq`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(from = "f64", into = "f64")]
pub struct OrderedHa(i64);

impl OrderedHa {
    pub fn new(ha: f64) -> Self {
        OrderedHa((ha * 1000.0).round() as i64)
    }

    pub fn ha(self) -> f64 {
        self.0 as f64 / 1000.0
    }
}

impl From<f64> for OrderedHa {
    fn from(v: f64) -> Self {
        OrderedHa::new(v)
    }
}

impl From<OrderedHa> for f64 {
    fn from(v: OrderedHa) -> f64 {
        v.ha()
    }
}

impl Eligibility {
    pub fn area_leq(threshold_ha: f64) -> Self {
        Eligibility::AreaLeq {
            threshold_ha: OrderedHa::new(threshold_ha),
        }
    }

    pub fn admits(&self, household: &Household) -> bool {
        match self {
            Eligibility::All => true,
            Eligibility::AreaLeq { threshold_ha } => {
                household.cultivated_area() <= threshold_ha.ha() + 1e-9
            }
            Eligibility::Listed { ids } => ids.contains(&household.id),
            Eligibility::None => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsidyPolicy {
    pub name: String,
    /// Share of the market fertilizer price covered, 0..=1.
    pub rate: f64,
    /// Subsidized kg per eligible household.
    pub quota_kg: f64,
    pub eligibility: Eligibility,
}

impl SubsidyPolicy {
    pub fn none(name: &str) -> Self {
        SubsidyPolicy {
            name: name.to_owned(),
            rate: 0.0,
            quota_kg: 0.0,
            eligibility: Eligibility::None,
        }
    }

    /// Whether the household can buy any fertilizer at the subsidized price.
    pub fn subsidizes(&self, household: &Household) -> bool {
        self.rate > 0.0 && self.quota_kg > 0.0 && self.eligibility.admits(household)
    }

    pub fn is_valid(&self) -> bool {
        (0.0..=1.0).contains(&self.rate) && self.quota_kg >= 0.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    Autarky,
    Seller,
    Buyer,
}

impl Regime {
    pub fn as_str(self) -> &'static str {
        match self {
            Regime::Autarky => "autarky",
            Regime::Seller => "seller",
            Regime::Buyer => "buyer",
        }
    }
}

/// First-order optimality residuals, measured on the scaled problem.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct KktReport {
    pub stationarity: f64,
    pub primal_feasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.stationarity
            .max(self.primal_feasibility)
            .max(self.complementarity)
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct Solution {
    pub household: HouseholdId,
    /// ha per activity
    pub levels: BTreeMap<ActivityId, f64>,
    /// kg per product
    pub production: BTreeMap<ProductId, f64>,
    pub sales: BTreeMap<ProductId, f64>,
    pub purchases: BTreeMap<ProductId, f64>,
    pub self_consumed: BTreeMap<ProductId, f64>,
    pub consumed: BTreeMap<ProductId, f64>,
    /// FCFA per kg
    pub internal_price: BTreeMap<ProductId, f64>,
    pub regime: BTreeMap<ProductId, Regime>,
    pub fertilizer_subsidized_kg: f64,
    pub fertilizer_unsubsidized_kg: f64,
    /// Shadow prices of named constraints, in FCFA per unit of the resource.
    pub duals: BTreeMap<String, f64>,
    pub farm_income: f64,
    pub total_income: f64,
    pub subsidy_outlay: f64,
    pub kkt: KktReport,
}

impl Solution {
    pub fn fertilizer_kg(&self) -> f64 {
        self.fertilizer_subsidized_kg + self.fertilizer_unsubsidized_kg
    }

    pub fn area(&self) -> f64 {
        self.levels.values().sum()
    }

    /// Constraints with a strictly positive shadow price.
    pub fn binding_constraints(&self) -> Vec<&str> {
        self.duals
            .iter()
            .filter(|(_, v)| **v > 1e-9)
            .map(|(k, _)| k.as_str())
            .collect()
    }
}

/// A complete model instance: the unit that is written to and read from disk.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInstance {
    pub manifest: ModelManifest,
    pub products: Vec<Product>,
    pub activities: Vec<Activity>,
    pub households: Vec<Household>,
    pub prices: PriceSystem,
}

impl ModelInstance {
    pub fn activity(&self, id: &ActivityId) -> Option<&Activity> {
        self.activities.iter().find(|a| &a.id == id)
    }

    pub fn activity_map(&self) -> BTreeMap<ActivityId, &Activity> {
        self.activities.iter().map(|a| (a.id.clone(), a)).collect()
    }

    pub fn product_map(&self) -> BTreeMap<ProductId, &Product> {
        self.products.iter().map(|p| (p.id.clone(), p)).collect()
    }

    /// Base-year policy: observed beneficiaries at the given rate and quota.
    pub fn base_policy(&self, rate: f64, quota_kg: f64) -> SubsidyPolicy {
        SubsidyPolicy {
            name: "baseline".to_owned(),
            rate,
            quota_kg,
            eligibility: Eligibility::Listed {
                ids: self
                    .households
                    .iter()
                    .filter(|h| h.base_beneficiary)
                    .map(|h| h.id.clone())
                    .collect(),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelManifest {
    pub schema_version: u32,
    pub base_year: i32,
    pub currency: String,
}

impl Default for ModelManifest {
    fn default() -> Self {
        ModelManifest {
            schema_version: 1,
            base_year: 2011,
            currency: "FCFA".to_owned(),
        }
    }
}

/// A violated invariant, attached to the household or activity it concerns.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Diagnostic {
    pub subject: String,
    pub message: String,
}

impl Diagnostic {
    pub fn new(subject: impl Into<String>, message: impl Into<String>) -> Self {
        Diagnostic {
            subject: subject.into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.subject, self.message)
    }
}

const LAND_TOL: f64 = 1e-9;

/// Check every type invariant; returns one diagnostic per violation.
pub fn validate_model(
    households: &[Household],
    activities: &[Activity],
    prices: &PriceSystem,
) -> Vec<Diagnostic> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    for a in activities {
        let subject = format!("activity {}", a.id);
        if !seen.insert(a.id.clone()) {
            out.push(Diagnostic::new(&subject, "duplicate activity id"));
        }
        if !(a.yield_per_ha >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative yield"));
        }
        if a.input_costs.items().iter().any(|(_, v)| !(*v >= 0.0)) {
            out.push(Diagnostic::new(&subject, "negative input cost"));
        }
        if !(a.fertilizer_qty >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative fertilizer quantity"));
        }
        if !(a.labor_req >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative labor requirement"));
        }
        if a.fertilizer_qty > 0.0
            && prices.fertilizer_market_price > 0.0
            && a.input_costs.fertilizer <= 0.0
        {
            out.push(Diagnostic::new(
                &subject,
                "fertilizer used but fertilizer cost is zero",
            ));
        }
        if !prices.products.contains_key(&a.product) {
            out.push(Diagnostic::new(&subject, format!("no price for product {}", a.product)));
        }
    }

    for (id, p) in &prices.products {
        let subject = format!("product {id}");
        if !(p.market >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative market price"));
        }
        if p.buy_markup < 1.0 {
            out.push(Diagnostic::new(&subject, "buy factor below 1"));
        }
        if p.sell_markdown > 1.0 {
            out.push(Diagnostic::new(&subject, "sell factor above 1"));
        }
        if p.sell_markdown < 0.0 {
            out.push(Diagnostic::new(&subject, "negative sell factor"));
        }
    }
    if !(prices.fertilizer_market_price >= 0.0) {
        out.push(Diagnostic::new("fertilizer", "negative fertilizer price"));
    }

    let by_id: BTreeMap<&ActivityId, &Activity> = activities.iter().map(|a| (&a.id, a)).collect();
    let mut hh_seen = BTreeSet::new();
    for h in households {
        let subject = format!("household {}", h.id);
        if !hh_seen.insert(h.id.clone()) {
            out.push(Diagnostic::new(&subject, "duplicate household id"));
        }
        if !(h.weight >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative weight"));
        }
        for season in Season::ALL {
            if !(h.land.get(season) >= 0.0) {
                out.push(Diagnostic::new(&subject, "negative land endowment"));
            }
            if !(h.labor.get(season) >= 0.0) {
                out.push(Diagnostic::new(&subject, "negative labor endowment"));
            }
        }
        if !(h.cash_endowment >= 0.0) {
            out.push(Diagnostic::new(&subject, "negative cash endowment"));
        }
        let mut used = PerSeason::default();
        for (aid, level) in &h.observed_levels {
            match by_id.get(aid) {
                Some(a) => *used.get_mut(a.season) += level,
                None => out.push(Diagnostic::new(&subject, format!("unknown activity {aid}"))),
            }
            if !(*level >= 0.0) {
                out.push(Diagnostic::new(&subject, format!("negative level for {aid}")));
            }
        }
        for season in Season::ALL {
            let cap = h.land.get(season);
            if used.get(season) > cap + LAND_TOL * cap.max(1.0) {
                out.push(Diagnostic::new(
                    &subject,
                    format!(
                        "land overcommitted in {} season: {:.4} ha used, {:.4} ha available",
                        season.as_str(),
                        used.get(season),
                        cap
                    ),
                ));
            }
        }
        for (pid, c) in &h.observed_consumption {
            if !(*c >= 0.0) {
                out.push(Diagnostic::new(&subject, format!("negative consumption of {pid}")));
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn fixture() -> (Vec<Household>, Vec<Activity>, PriceSystem) {
        let mil = ProductId::from("mil");
        let act = Activity {
            id: ActivityId::from("mil_ext_rainy"),
            product: mil.clone(),
            practice: Practice::Extensive,
            season: Season::Rainy,
            yield_per_ha: 600.0,
            input_costs: InputCosts {
                seed: 3000.0,
                fertilizer: 1000.0,
                ..Default::default()
            },
            fertilizer_qty: 4.0,
            labor_req: 40.0,
            subsidy_eligible_fertilizer: true,
            production_subsidy: 0.0,
        };
        let mk = |id: &str, area: f64| Household {
            id: HouseholdId::from(id),
            region: RegionId::from("Kaffrine"),
            weight: 100.0,
            land: PerSeason::new(5.0, 0.0),
            labor: PerSeason::new(600.0, 0.0),
            cash_endowment: 50_000.0,
            exog_income: 0.0,
            observed_levels: [(act.id.clone(), area)].into_iter().collect(),
            observed_consumption: BTreeMap::new(),
            adult_equivalents: 5.0,
            base_beneficiary: false,
        };
        let mut prices = PriceSystem {
            fertilizer_market_price: 250.0,
            ..Default::default()
        };
        prices.products.insert(
            mil,
            ProductPrice {
                market: 170.0,
                buy_markup: 1.2,
                sell_markdown: 0.8,
            },
        );
        (vec![mk("h1", 3.0), mk("h2", 5.0)], vec![act], prices)
    }

    #[test]
    fn consistent_fixture_has_no_diagnostics() {
        let (h, a, p) = fixture();
        assert!(validate_model(&h, &a, &p).is_empty());
    }

    #[test]
    fn overcommitted_land_is_reported() {
        let (mut h, a, p) = fixture();
        h[0].observed_levels.insert(a[0].id.clone(), 6.0);
        let diags = validate_model(&h, &a, &p);
        assert_eq!(diags.len(), 1);
        assert!(diags[0].message.contains("land overcommitted"));
        assert_eq!(diags[0].subject, "household h1");
    }

    #[test]
    fn buy_factor_below_one_is_reported() {
        let (h, a, mut p) = fixture();
        p.products.get_mut(&ProductId::from("mil")).unwrap().buy_markup = 0.9;
        let diags = validate_model(&h, &a, &p);
        assert_eq!(diags.len(), 1);
        assert_eq!(diags[0].message, "buy factor below 1");
    }

    #[test]
    fn validation_is_idempotent() {
        let (mut h, a, p) = fixture();
        h[1].weight = -1.0;
        let first = validate_model(&h, &a, &p);
        let second = validate_model(&h, &a, &p);
        assert_eq!(first, second);
        assert_eq!(first.len(), 1);
    }

    #[test]
    fn eligibility_predicates() {
        let (h, _, _) = fixture();
        assert!(Eligibility::All.admits(&h[0]));
        assert!(!Eligibility::None.admits(&h[0]));
        assert!(Eligibility::area_leq(5.0).admits(&h[1]));
        assert!(!Eligibility::area_leq(4.9).admits(&h[1]));
        let listed = Eligibility::Listed {
            ids: [HouseholdId::from("h2")].into_iter().collect(),
        };
        assert!(!listed.admits(&h[0]));
        assert!(listed.admits(&h[1]));
    }
}

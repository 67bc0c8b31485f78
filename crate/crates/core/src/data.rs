//! Synthetic personas and offers.
//!
//! Personas are sampled from fixed attribute catalogs; each training example
//! pairs a persona with three offers that satisfy [`acceptance_rule`] and
//! three that violate it. The offer templates, tag lexicon and the modifier
//! compatibility table ship as JSON files under `data/` and are compiled in.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::sync::OnceLock;

use rand::seq::index::sample;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::model::tokenizer::words;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset size must be at least 1")]
    EmptyRequest,
    #[error("catalog cannot supply {needed} {kind} offers for persona {persona}")]
    CatalogTooSmall {
        persona: String,
        kind: &'static str,
        needed: usize,
    },
    #[error("split fractions must be non-negative and sum to 1, got {0:?}")]
    BadFractions([f64; 3]),
    #[error("{n} examples are too few for split {sizes:?}")]
    SplitTooSmall { n: usize, sizes: [usize; 3] },
    #[error("persona name `{0}` occurs more than once")]
    DuplicatePersona(String),
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid example for {persona}: {msg}")]
    Invalid { persona: String, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, DataError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Gender {
    Male,
    Female,
    #[serde(rename = "Non-binary")]
    NonBinary,
}

impl Gender {
    pub const ALL: [Gender; 3] = [Gender::Male, Gender::Female, Gender::NonBinary];

    pub fn label(self) -> &'static str {
        match self {
            Gender::Male => "Male",
            Gender::Female => "Female",
            Gender::NonBinary => "Non-binary",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SpendingPattern {
    #[serde(rename = "Budget-conscious")]
    BudgetConscious,
    #[serde(rename = "High-spender")]
    HighSpender,
    Moderate,
}

impl SpendingPattern {
    pub const ALL: [SpendingPattern; 3] = [
        SpendingPattern::BudgetConscious,
        SpendingPattern::HighSpender,
        SpendingPattern::Moderate,
    ];

    pub fn label(self) -> &'static str {
        match self {
            SpendingPattern::BudgetConscious => "Budget-conscious",
            SpendingPattern::HighSpender => "High-spender",
            SpendingPattern::Moderate => "Moderate",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PaymentMethod {
    #[serde(rename = "Credit Card")]
    CreditCard,
    #[serde(rename = "Debit Card")]
    DebitCard,
    #[serde(rename = "Buy Now Pay Later")]
    BuyNowPayLater,
    Cash,
}

impl PaymentMethod {
    pub const ALL: [PaymentMethod; 4] = [
        PaymentMethod::CreditCard,
        PaymentMethod::DebitCard,
        PaymentMethod::BuyNowPayLater,
        PaymentMethod::Cash,
    ];

    pub fn label(self) -> &'static str {
        match self {
            PaymentMethod::CreditCard => "Credit Card",
            PaymentMethod::DebitCard => "Debit Card",
            PaymentMethod::BuyNowPayLater => "Buy Now Pay Later",
            PaymentMethod::Cash => "Cash",
        }
    }

    /// Parse a label such as `"Buy Now Pay Later"`.
    pub fn from_label(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|p| p.label() == s)
    }
}

/// Price-positioning qualifier carried by some offers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tier {
    Luxury,
    Value,
}

impl Tier {
    pub const ALL: [Tier; 2] = [Tier::Luxury, Tier::Value];

    fn key(self) -> &'static str {
        match self {
            Tier::Luxury => "luxury",
            Tier::Value => "value",
        }
    }
}

/// Optional spending and payment qualifiers of an offer.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Modifiers {
    #[serde(rename = "Tier")]
    pub tier: Option<Tier>,
    #[serde(rename = "Payment")]
    pub payment: Option<PaymentMethod>,
}

const MIN_AGE: u32 = 18;
const MAX_AGE: u32 = 70;
const MIN_INCOME: u32 = 30_000;
const MAX_INCOME: u32 = 200_000;

/// Structured customer record.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    #[serde(rename = "Name")]
    pub name: String,
    #[serde(rename = "Age")]
    pub age: u32,
    #[serde(rename = "Gender")]
    pub gender: Gender,
    #[serde(rename = "Monthly Income", with = "income_format")]
    pub monthly_income: u32,
    #[serde(rename = "Spending Pattern")]
    pub spending_pattern: SpendingPattern,
    #[serde(rename = "Preferred Payment Method")]
    pub preferred_payment: PaymentMethod,
    #[serde(rename = "Interests")]
    pub interests: Vec<String>,
    #[serde(rename = "Financial Goals")]
    pub financial_goals: Vec<String>,
}

mod income_format {
    use super::*;

    pub fn serialize<S: Serializer>(v: &u32, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&super::format_income(*v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<u32, D::Error> {
        let s = String::deserialize(d)?;
        let digits: String = s.chars().filter(|c| c.is_ascii_digit()).collect();
        if !s.starts_with('$') || digits.is_empty() {
            return Err(serde::de::Error::custom(format!("bad income `{s}`")));
        }
        digits.parse().map_err(serde::de::Error::custom)
    }
}

/// `111969` -> `"$111,969"`.
pub fn format_income(v: u32) -> String {
    let digits = v.to_string();
    let mut out = String::from("$");
    for (i, c) in digits.chars().enumerate() {
        if i > 0 && (digits.len() - i).is_multiple_of(3) {
            out.push(',');
        }
        out.push(c);
    }
    out
}

/// Income range label used in the model input text.
pub fn income_bucket(v: u32) -> &'static str {
    match v {
        0..=59_999 => "30k-60k",
        60_000..=89_999 => "60k-90k",
        90_000..=119_999 => "90k-120k",
        120_000..=159_999 => "120k-160k",
        _ => "160k-200k",
    }
}

impl Persona {
    /// Union of interests and financial goals.
    pub fn tag_set(&self) -> BTreeSet<&str> {
        self.interests
            .iter()
            .chain(&self.financial_goals)
            .map(String::as_str)
            .collect()
    }

    /// Flattened model input, e.g.
    /// `name P9654 age 30 gender female income 90k-120k spending budget-conscious ...`.
    pub fn to_model_text(&self) -> String {
        format!(
            "name {} age {} gender {} income {} spending {} payment {} interests {} goals {}",
            self.name,
            self.age,
            self.gender.label(),
            income_bucket(self.monthly_income),
            self.spending_pattern.label(),
            self.preferred_payment.label(),
            self.interests.join(" "),
            self.financial_goals.join(" "),
        )
        .to_lowercase()
    }

    pub fn validate(&self) -> std::result::Result<(), String> {
        let cat = catalog();
        if !(MIN_AGE..=MAX_AGE).contains(&self.age) {
            return Err(format!("age {} outside [{MIN_AGE}, {MAX_AGE}]", self.age));
        }
        if !(MIN_INCOME..=MAX_INCOME).contains(&self.monthly_income) {
            return Err(format!("income {} outside bounds", self.monthly_income));
        }
        check_list("interests", &self.interests, &cat.interests, 5)?;
        check_list("financial goals", &self.financial_goals, &cat.goals, 3)
    }
}

fn check_list(
    what: &str,
    items: &[String],
    allowed: &[String],
    max: usize,
) -> std::result::Result<(), String> {
    if items.is_empty() || items.len() > max {
        return Err(format!(
            "{what}: expected 1..={max} entries, got {}",
            items.len()
        ));
    }
    let uniq: HashSet<&String> = items.iter().collect();
    if uniq.len() != items.len() {
        return Err(format!("{what}: duplicates"));
    }
    if let Some(bad) = items.iter().find(|i| !allowed.contains(i)) {
        return Err(format!("{what}: `{bad}` not in catalog"));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Offer {
    #[serde(rename = "Text")]
    pub text: String,
    #[serde(rename = "Tags")]
    pub category_tags: BTreeSet<String>,
    #[serde(flatten)]
    pub modifiers: Modifiers,
}

impl Offer {
    /// Compose `[tier phrase] template [payment phrase]`.
    pub fn compose(template: &Template, modifiers: Modifiers, tier_phrase: usize) -> Self {
        let cat = catalog();
        let mut parts = Vec::new();
        if let Some(t) = modifiers.tier {
            let phrases = cat.tier_phrases(t);
            parts.push(phrases[tier_phrase % phrases.len()].as_str());
        }
        parts.push(template.text.as_str());
        if let Some(p) = modifiers.payment {
            parts.push(cat.payment(p).phrase.as_str());
        }
        Self {
            text: parts.join(" "),
            category_tags: template.tags.iter().cloned().collect(),
            modifiers,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    #[serde(flatten)]
    pub persona: Persona,
    #[serde(rename = "AcceptedOffers")]
    pub accepted: Vec<Offer>,
    #[serde(rename = "RejectedOffers")]
    pub rejected: Vec<Offer>,
}

pub const OFFERS_PER_SIDE: usize = 3;

impl TrainingExample {
    pub fn validate(&self) -> Result<()> {
        let err = |msg: String| DataError::Invalid {
            persona: self.persona.name.clone(),
            msg,
        };
        self.persona.validate().map_err(err)?;
        if self.accepted.len() != OFFERS_PER_SIDE || self.rejected.len() != OFFERS_PER_SIDE {
            return Err(err(format!(
                "expected {OFFERS_PER_SIDE} accepted and {OFFERS_PER_SIDE} rejected offers"
            )));
        }
        let cat = catalog();
        for o in self.accepted.iter().chain(&self.rejected) {
            if o.text.trim().is_empty() || o.category_tags.is_empty() {
                return Err(err("offer without text or tags".into()));
            }
            if let Some(t) = o.category_tags.iter().find(|t| !cat.is_tag(t)) {
                return Err(err(format!("unknown tag `{t}`")));
            }
        }
        if let Some(o) = self
            .accepted
            .iter()
            .find(|o| !acceptance_rule(&self.persona, o))
        {
            return Err(err(format!(
                "accepted offer `{}` fails the acceptance rule",
                o.text
            )));
        }
        if let Some(o) = self
            .rejected
            .iter()
            .find(|o| acceptance_rule(&self.persona, o))
        {
            return Err(err(format!(
                "rejected offer `{}` passes the acceptance rule",
                o.text
            )));
        }
        let acc: HashSet<&str> = self.accepted.iter().map(|o| o.text.as_str()).collect();
        if self.rejected.iter().any(|o| acc.contains(o.text.as_str())) {
            return Err(err("offer text in both lists".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Deserialize)]
pub struct Template {
    pub text: String,
    pub tags: Vec<String>,
}

#[derive(Clone, Debug, Deserialize)]
pub struct PaymentPhrase {
    pub phrase: String,
    pub keyword: String,
}

#[derive(Debug, Deserialize)]
struct CatalogFile {
    interests: Vec<String>,
    goals: Vec<String>,
    keywords: std::collections::BTreeMap<String, Vec<String>>,
    tiers: std::collections::BTreeMap<String, Vec<String>>,
    payments: std::collections::BTreeMap<String, PaymentPhrase>,
    templates: Vec<Template>,
}

#[derive(Debug, Deserialize)]
struct CompatibilityFile {
    tier: std::collections::BTreeMap<String, Vec<Tier>>,
    payment: std::collections::BTreeMap<String, Vec<PaymentMethod>>,
}

/// Offer templates, tag lexicon and modifier compatibility table.
#[derive(Debug)]
pub struct Catalog {
    pub interests: Vec<String>,
    pub goals: Vec<String>,
    pub templates: Vec<Template>,
    /// `(tag, keyword tokens)` pairs used to recognise tags in free text.
    tag_keywords: Vec<(String, Vec<String>)>,
    tier_phrases: Vec<(Tier, Vec<String>)>,
    payment_phrases: Vec<(PaymentMethod, PaymentPhrase)>,
    compat_tier: Vec<(SpendingPattern, Vec<Tier>)>,
    compat_payment: Vec<(PaymentMethod, Vec<PaymentMethod>)>,
}

static CATALOG: OnceLock<Catalog> = OnceLock::new();

/// The shipped catalog.
pub fn catalog() -> &'static Catalog {
    CATALOG.get_or_init(|| {
        Catalog::from_json(
            include_str!("../data/offer_catalog.json"),
            include_str!("../data/compatibility.json"),
        )
        .expect("shipped catalog files are valid")
    })
}

impl Catalog {
    pub fn from_json(catalog: &str, compat: &str) -> std::result::Result<Self, String> {
        let c: CatalogFile = serde_json::from_str(catalog).map_err(|e| e.to_string())?;
        let t: CompatibilityFile = serde_json::from_str(compat).map_err(|e| e.to_string())?;
        let all_tags: Vec<&String> = c.interests.iter().chain(&c.goals).collect();
        for tpl in &c.templates {
            if tpl.tags.is_empty() || tpl.tags.iter().any(|tag| !all_tags.contains(&tag)) {
                return Err(format!("template `{}` has invalid tags", tpl.text));
            }
        }
        let tag_keywords = all_tags
            .iter()
            .map(|tag| {
                let kws = c
                    .keywords
                    .get(*tag)
                    .ok_or_else(|| format!("no keywords for tag `{tag}`"))?;
                Ok(kws
                    .iter()
                    .map(|k| ((*tag).clone(), words(k)))
                    .collect::<Vec<_>>())
            })
            .collect::<std::result::Result<Vec<_>, String>>()?
            .into_iter()
            .flatten()
            .collect();
        let tier_phrases = Tier::ALL
            .iter()
            .map(|&tier| {
                c.tiers
                    .get(tier.key())
                    .filter(|p| !p.is_empty())
                    .map(|p| (tier, p.clone()))
                    .ok_or_else(|| format!("no phrases for tier {tier:?}"))
            })
            .collect::<std::result::Result<_, _>>()?;
        let payment_phrases = PaymentMethod::ALL
            .iter()
            .map(|&p| {
                c.payments
                    .get(p.label())
                    .map(|ph| (p, ph.clone()))
                    .ok_or_else(|| format!("no phrase for payment {}", p.label()))
            })
            .collect::<std::result::Result<_, _>>()?;
        let compat_tier = SpendingPattern::ALL
            .iter()
            .map(|&s| (s, t.tier.get(s.label()).cloned().unwrap_or_default()))
            .collect();
        let compat_payment = PaymentMethod::ALL
            .iter()
            .map(|&p| (p, t.payment.get(p.label()).cloned().unwrap_or_default()))
            .collect();
        Ok(Self {
            interests: c.interests,
            goals: c.goals,
            templates: c.templates,
            tag_keywords,
            tier_phrases,
            payment_phrases,
            compat_tier,
            compat_payment,
        })
    }

    pub fn is_tag(&self, tag: &str) -> bool {
        self.interests.iter().chain(&self.goals).any(|t| t == tag)
    }

    pub fn tier_phrases(&self, tier: Tier) -> &[String] {
        &self
            .tier_phrases
            .iter()
            .find(|(t, _)| *t == tier)
            .expect("all tiers present")
            .1
    }

    pub fn payment(&self, p: PaymentMethod) -> &PaymentPhrase {
        &self
            .payment_phrases
            .iter()
            .find(|(q, _)| *q == p)
            .expect("all payment methods present")
            .1
    }

    /// Tiers a spending pattern accepts (offers without a tier always pass).
    pub fn compatible_tiers(&self, s: SpendingPattern) -> &[Tier] {
        &self
            .compat_tier
            .iter()
            .find(|(q, _)| *q == s)
            .expect("all patterns present")
            .1
    }

    pub fn compatible_payments(&self, p: PaymentMethod) -> &[PaymentMethod] {
        &self
            .compat_payment
            .iter()
            .find(|(q, _)| *q == p)
            .expect("all methods present")
            .1
    }

    /// Recognise tags and modifiers in free text by keyword matching on word tokens.
    pub fn parse_offer_text(
        &self,
        text: &str,
    ) -> (BTreeSet<String>, Vec<Tier>, Vec<PaymentMethod>) {
        let toks = words(text);
        let has = |kw: &[String]| !kw.is_empty() && toks.windows(kw.len()).any(|w| w == kw);
        let tags = self
            .tag_keywords
            .iter()
            .filter(|(_, kw)| has(kw))
            .map(|(t, _)| t.clone())
            .collect();
        let tiers = self
            .tier_phrases
            .iter()
            .filter(|(_, phrases)| phrases.iter().any(|p| has(&words(p))))
            .map(|(t, _)| *t)
            .collect();
        let payments = self
            .payment_phrases
            .iter()
            .filter(|(_, ph)| has(&words(&ph.keyword)))
            .map(|(p, _)| *p)
            .collect();
        (tags, tiers, payments)
    }
}

fn modifiers_compatible(persona: &Persona, tiers: &[Tier], payments: &[PaymentMethod]) -> bool {
    let cat = catalog();
    let ok_tiers = cat.compatible_tiers(persona.spending_pattern);
    let ok_pay = cat.compatible_payments(persona.preferred_payment);
    tiers.iter().all(|t| ok_tiers.contains(t)) && payments.iter().all(|p| ok_pay.contains(p))
}

/// Ground-truth acceptance: some tag matches the persona's interests or goals,
/// and every modifier is allowed by the compatibility table.
pub fn acceptance_rule(persona: &Persona, offer: &Offer) -> bool {
    let wanted = persona.tag_set();
    let overlap = offer
        .category_tags
        .iter()
        .any(|t| wanted.contains(t.as_str()));
    let tiers: Vec<Tier> = offer.modifiers.tier.into_iter().collect();
    let pays: Vec<PaymentMethod> = offer.modifiers.payment.into_iter().collect();
    overlap && modifiers_compatible(persona, &tiers, &pays)
}

/// Same rule applied to parsed free text (tags and modifiers recognised by keyword).
pub fn acceptance_rule_for_text(persona: &Persona, text: &str) -> (bool, BTreeSet<String>) {
    let (tags, tiers, pays) = catalog().parse_offer_text(text);
    let wanted = persona.tag_set();
    let matched: BTreeSet<String> = tags
        .iter()
        .filter(|t| wanted.contains(t.as_str()))
        .cloned()
        .collect();
    let ok = !matched.is_empty() && modifiers_compatible(persona, &tiers, &pays);
    (ok, matched)
}

fn example_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

fn sample_tags<R: Rng>(rng: &mut R, catalog: &[String], max: usize) -> Vec<String> {
    let k = rng.random_range(1..=max.min(catalog.len()));
    let mut idx = sample(rng, catalog.len(), k).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| catalog[i].clone()).collect()
}

fn sample_persona(seed: u64, index: usize) -> (Persona, ChaCha8Rng) {
    let cat = catalog();
    let mut rng = example_rng(seed, index);
    let persona = Persona {
        name: format!("P{:04}", index + 1),
        age: rng.random_range(MIN_AGE..=MAX_AGE),
        gender: *Gender::ALL.choose(&mut rng).expect("non-empty"),
        monthly_income: rng.random_range(MIN_INCOME..=MAX_INCOME),
        // stratified: each pattern gets n/3 (+-1) personas
        spending_pattern: SpendingPattern::ALL[index % SpendingPattern::ALL.len()],
        preferred_payment: *PaymentMethod::ALL.choose(&mut rng).expect("non-empty"),
        interests: sample_tags(&mut rng, &cat.interests, 5),
        financial_goals: sample_tags(&mut rng, &cat.goals, 3),
    };
    (persona, rng)
}

fn pick_templates<'a, R: Rng>(
    rng: &mut R,
    persona: &Persona,
    kind: &'static str,
    pred: impl Fn(&Template) -> bool,
) -> Result<Vec<&'a Template>> {
    let pool: Vec<&Template> = catalog().templates.iter().filter(|t| pred(t)).collect();
    if pool.len() < OFFERS_PER_SIDE {
        return Err(DataError::CatalogTooSmall {
            persona: persona.name.clone(),
            kind,
            needed: OFFERS_PER_SIDE,
        });
    }
    Ok(sample(rng, pool.len(), OFFERS_PER_SIDE)
        .into_iter()
        .map(|i| pool[i])
        .collect())
}

fn generate_example(seed: u64, index: usize) -> Result<TrainingExample> {
    let cat = catalog();
    let (persona, mut rng) = sample_persona(seed, index);
    let wanted = persona.tag_set();

    let acc_templates = pick_templates(&mut rng, &persona, "accepted", |t| {
        t.tags.iter().all(|g| wanted.contains(g.as_str()))
    })?;
    let ok_tiers = cat.compatible_tiers(persona.spending_pattern);
    let ok_pays = cat.compatible_payments(persona.preferred_payment);
    let mut accepted = Vec::with_capacity(OFFERS_PER_SIDE);
    for tpl in acc_templates {
        let tier = if rng.random_bool(0.5) {
            ok_tiers.choose(&mut rng).copied()
        } else {
            None
        };
        let payment = if rng.random_bool(0.5) {
            ok_pays.choose(&mut rng).copied()
        } else {
            None
        };
        let phrase = rng.random_range(0..3);
        accepted.push(Offer::compose(tpl, Modifiers { tier, payment }, phrase));
    }

    let rej_templates = pick_templates(&mut rng, &persona, "rejected", |t| {
        t.tags.iter().all(|g| !wanted.contains(g.as_str()))
    })?;
    let mut rejected = Vec::with_capacity(OFFERS_PER_SIDE);
    for tpl in rej_templates {
        let tier = [None, Some(Tier::Luxury), Some(Tier::Value)]
            .choose(&mut rng)
            .copied()
            .flatten();
        let payment = [
            None,
            Some(PaymentMethod::CreditCard),
            Some(PaymentMethod::DebitCard),
            Some(PaymentMethod::BuyNowPayLater),
            Some(PaymentMethod::Cash),
        ]
        .choose(&mut rng)
        .copied()
        .flatten();
        let phrase = rng.random_range(0..3);
        rejected.push(Offer::compose(tpl, Modifiers { tier, payment }, phrase));
    }

    Ok(TrainingExample {
        persona,
        accepted,
        rejected,
    })
}

/// `n` examples, deterministic in `seed`. Each example draws from its own
/// stream of a seeded ChaCha generator, so generation order does not matter.
pub fn generate_dataset(n: usize, seed: u64) -> Result<Vec<TrainingExample>> {
    if n == 0 {
        return Err(DataError::EmptyRequest);
    }
    (0..n).map(|i| generate_example(seed, i)).collect()
}

/// Disjoint train/validation/test partition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train: Vec<TrainingExample>,
    pub val: Vec<TrainingExample>,
    pub test: Vec<TrainingExample>,
}

/// Default split fractions. On 25,000 examples they give 21,600 / 2,400 / 1,000.
pub const DEFAULT_SPLIT: [f64; 3] = [0.864, 0.096, 0.04];

/// Part sizes for `n` items: validation and test are rounded, train takes the rest.
pub fn split_sizes(n: usize, fractions: [f64; 3]) -> Result<[usize; 3]> {
    let sum: f64 = fractions.iter().sum();
    if fractions.iter().any(|f| !(0.0..=1.0).contains(f)) || (sum - 1.0).abs() > 1e-9 {
        return Err(DataError::BadFractions(fractions));
    }
    let val = (n as f64 * fractions[1]).round() as usize;
    let test = (n as f64 * fractions[2]).round() as usize;
    if val + test > n {
        return Err(DataError::SplitTooSmall {
            n,
            sizes: [0, val, test],
        });
    }
    let sizes = [n - val - test, val, test];
    if sizes.iter().zip(fractions).any(|(&s, f)| f > 0.0 && s == 0) {
        return Err(DataError::SplitTooSmall { n, sizes });
    }
    Ok(sizes)
}

/// Seeded shuffle then partition. Persona names must be unique, which makes
/// the parts persona-disjoint.
pub fn split(examples: &[TrainingExample], fractions: [f64; 3], seed: u64) -> Result<DatasetSplit> {
    let sizes = split_sizes(examples.len(), fractions)?;
    let mut seen = HashSet::new();
    for e in examples {
        if !seen.insert(e.persona.name.as_str()) {
            return Err(DataError::DuplicatePersona(e.persona.name.clone()));
        }
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let take = |r: std::ops::Range<usize>| -> Vec<TrainingExample> {
        order[r].iter().map(|&i| examples[i].clone()).collect()
    };
    Ok(DatasetSplit {
        train: take(0..sizes[0]),
        val: take(sizes[0]..sizes[0] + sizes[1]),
        test: take(sizes[0] + sizes[1]..examples.len()),
    })
}

pub fn write_jsonl(path: &Path, examples: &[TrainingExample]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in examples {
        serde_json::to_writer(&mut w, e).map_err(std::io::Error::from)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<TrainingExample>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: TrainingExample = serde_json::from_str(&line).map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        ex.validate().map_err(|e| DataError::Parse {
            line: i + 1,
            msg: e.to_string(),
        })?;
        out.push(ex);
    }
    Ok(out)
}

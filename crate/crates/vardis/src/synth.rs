//! Synthetic MCQ corpus generation from arithmetic templates with a closed,
//! rule-based error taxonomy. Each distractor is produced by a named error
//! rule whose description doubles as the gold error label, giving the
//! pipeline a known ground truth to recover.
//!
//! Stems are sampled as (phrasing, parameters) combinations from small
//! parameter pools, so the same values reappear under different phrasings.
//! Splitting by stem then holds out phrasing/value combinations while
//! keeping the value space learnable.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{normalize_text, Corpus, DistractorEntry, Mcq};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FamilyId {
    FractionDivision,
    Squaring,
    Lcm,
}

impl FamilyId {
    pub fn all() -> [FamilyId; 3] {
        [FamilyId::FractionDivision, FamilyId::Squaring, FamilyId::Lcm]
    }

    pub fn name(&self) -> &'static str {
        match self {
            FamilyId::FractionDivision => "fraction-division",
            FamilyId::Squaring => "squaring",
            FamilyId::Lcm => "lcm",
        }
    }

    pub fn parse(s: &str) -> Result<FamilyId> {
        match s {
            "fraction-division" => Ok(FamilyId::FractionDivision),
            "squaring" => Ok(FamilyId::Squaring),
            "lcm" => Ok(FamilyId::Lcm),
            other => Err(Error::Argument(format!(
                "unknown template family {other:?} (expected fraction-division, squaring, lcm)"
            ))),
        }
    }
}

/// Parameters of one stem instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StemParams {
    /// num/den ÷ divisor, with divisor dividing both num and den.
    Fraction { num: i64, den: i64, divisor: i64 },
    Squaring { n: i64 },
    Lcm { x: i64, y: i64 },
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: i64, b: i64) -> i64 {
    a / gcd(a, b) * b
}

/// Canonical rendering: reduced fraction, or a bare integer when the reduced
/// denominator is one.
fn render_fraction(num: i64, den: i64) -> String {
    assert!(den > 0);
    if num == 0 {
        return "0".into();
    }
    let g = gcd(num, den);
    let (n, d) = (num / g, den / g);
    if d == 1 {
        n.to_string()
    } else {
        format!("{n}/{d}")
    }
}

/// A rule-based misconception: a canonical label plus a deterministic
/// transform from stem parameters to the incorrect answer it produces.
#[derive(Debug, Clone, Copy)]
pub struct ErrorRule {
    pub id: &'static str,
    pub family: FamilyId,
    pub description: &'static str,
    transform: fn(&StemParams) -> Option<String>,
}

impl ErrorRule {
    pub fn apply(&self, params: &StemParams) -> Option<String> {
        (self.transform)(params)
    }
}

fn frac_parts(p: &StemParams) -> (i64, i64, i64) {
    match p {
        StemParams::Fraction { num, den, divisor } => (*num, *den, *divisor),
        _ => unreachable!("fraction rule applied to non-fraction params"),
    }
}

fn rule_frac_divide_both(p: &StemParams) -> Option<String> {
    let (num, den, c) = frac_parts(p);
    if num % c != 0 || den % c != 0 {
        return None;
    }
    Some(render_fraction(num / c, den / c))
}

fn rule_frac_divide_denominator(p: &StemParams) -> Option<String> {
    let (num, den, c) = frac_parts(p);
    if den % c != 0 {
        return None;
    }
    Some(render_fraction(num, den / c))
}

fn rule_frac_int_by_denominator(p: &StemParams) -> Option<String> {
    let (_, den, c) = frac_parts(p);
    Some(render_fraction(c, den))
}

fn rule_frac_subtract(p: &StemParams) -> Option<String> {
    let (num, den, c) = frac_parts(p);
    if den - c <= 0 || num - c < 0 {
        return None;
    }
    Some(render_fraction(num - c, den - c))
}

fn squaring_n(p: &StemParams) -> i64 {
    match p {
        StemParams::Squaring { n } => *n,
        _ => unreachable!("squaring rule applied to non-squaring params"),
    }
}

fn rule_square_double(p: &StemParams) -> Option<String> {
    Some((2 * squaring_n(p)).to_string())
}

fn rule_square_power_as_digit(p: &StemParams) -> Option<String> {
    Some(format!("{}2", squaring_n(p)))
}

fn rule_square_repeat_digit(p: &StemParams) -> Option<String> {
    let n = squaring_n(p);
    Some(format!("{n}{n}"))
}

fn lcm_parts(p: &StemParams) -> (i64, i64) {
    match p {
        StemParams::Lcm { x, y } => (*x, *y),
        _ => unreachable!("lcm rule applied to non-lcm params"),
    }
}

fn rule_lcm_product(p: &StemParams) -> Option<String> {
    let (x, y) = lcm_parts(p);
    Some((x * y).to_string())
}

fn rule_lcm_larger(p: &StemParams) -> Option<String> {
    let (x, y) = lcm_parts(p);
    Some(x.max(y).to_string())
}

fn rule_lcm_common_factor(p: &StemParams) -> Option<String> {
    let (x, y) = lcm_parts(p);
    Some(gcd(x, y).to_string())
}

const FRACTION_RULES: [ErrorRule; 4] = [
    ErrorRule {
        id: "frac-divide-both",
        family: FamilyId::FractionDivision,
        description:
            "When dividing a fraction by an integer, divides both the numerator and denominator by the integer",
        transform: rule_frac_divide_both,
    },
    ErrorRule {
        id: "frac-divide-denominator",
        family: FamilyId::FractionDivision,
        description: "When dividing a fraction by an integer, divides the denominator by the integer",
        transform: rule_frac_divide_denominator,
    },
    ErrorRule {
        id: "frac-int-by-denominator",
        family: FamilyId::FractionDivision,
        description:
            "When dividing a fraction by an integer, divides the integer by the denominator instead",
        transform: rule_frac_int_by_denominator,
    },
    ErrorRule {
        id: "frac-subtract",
        family: FamilyId::FractionDivision,
        description: "When dividing a fraction by an integer, subtracts the integer instead of dividing",
        transform: rule_frac_subtract,
    },
];

const SQUARING_RULES: [ErrorRule; 3] = [
    ErrorRule {
        id: "square-double",
        family: FamilyId::Squaring,
        description: "Mixes up squaring and multiplying by 2 or doubling",
        transform: rule_square_double,
    },
    ErrorRule {
        id: "square-power-as-digit",
        family: FamilyId::Squaring,
        description: "Reads a power as a normal digit",
        transform: rule_square_power_as_digit,
    },
    ErrorRule {
        id: "square-repeat-digit",
        family: FamilyId::Squaring,
        description: "Mixes up squaring with repeating a digit",
        transform: rule_square_repeat_digit,
    },
];

const LCM_RULES: [ErrorRule; 3] = [
    ErrorRule {
        id: "lcm-product",
        family: FamilyId::Lcm,
        description: "Believes finding the product of two numbers gives their lowest common multiple",
        transform: rule_lcm_product,
    },
    ErrorRule {
        id: "lcm-larger",
        family: FamilyId::Lcm,
        description:
            "Believes the largest number in a set of numbers is always their lowest common multiple",
        transform: rule_lcm_larger,
    },
    ErrorRule {
        id: "lcm-common-factor",
        family: FamilyId::Lcm,
        description: "Confuses factors and multiples",
        transform: rule_lcm_common_factor,
    },
];

pub fn rules_of(family: FamilyId) -> &'static [ErrorRule] {
    match family {
        FamilyId::FractionDivision => &FRACTION_RULES,
        FamilyId::Squaring => &SQUARING_RULES,
        FamilyId::Lcm => &LCM_RULES,
    }
}

fn stem_phrasings(family: FamilyId) -> &'static [&'static str] {
    match family {
        FamilyId::FractionDivision => &[
            "Calculate: {} ÷ {}",
            "Work out: {} ÷ {}",
            "What is {} ÷ {}?",
            "Evaluate: {} ÷ {}",
            "Find the value of {} ÷ {}",
        ],
        FamilyId::Squaring => &[
            "{}^2 = ?",
            "What is {}^2?",
            "Calculate {}^2",
            "Work out the value of {}^2",
            "Evaluate {}^2",
        ],
        FamilyId::Lcm => &[
            "What is the lowest common multiple of {} and {}?",
            "Find the lowest common multiple of {} and {}.",
            "Work out the LCM of {} and {}.",
            "What is the LCM of {} and {}?",
            "Calculate the lowest common multiple of {} and {}.",
        ],
    }
}

fn fill2(template: &str, a: &str, b: &str) -> String {
    template.replacen("{}", a, 1).replacen("{}", b, 1)
}

fn render_stem(family: FamilyId, params: &StemParams, phrasing: usize) -> String {
    let t = stem_phrasings(family)[phrasing];
    match params {
        StemParams::Fraction { num, den, divisor } => {
            fill2(t, &format!("{num}/{den}"), &divisor.to_string())
        }
        StemParams::Squaring { n } => fill2(t, &n.to_string(), ""),
        StemParams::Lcm { x, y } => fill2(t, &x.to_string(), &y.to_string()),
    }
}

pub fn key_of(params: &StemParams) -> String {
    match params {
        StemParams::Fraction { num, den, divisor } => render_fraction(*num, den * divisor),
        StemParams::Squaring { n } => (n * n).to_string(),
        StemParams::Lcm { x, y } => lcm(*x, *y).to_string(),
    }
}

fn explanation_of(params: &StemParams) -> String {
    match params {
        StemParams::Fraction { num, den, divisor } => {
            format!(
                "{num}/{den} ÷ {divisor} = {num}/{} = {}",
                den * divisor,
                render_fraction(*num, den * divisor)
            )
        }
        StemParams::Squaring { n } => format!("{n}^2 = {n} * {n} = {}", n * n),
        StemParams::Lcm { x, y } => {
            format!("{} is the smallest number that is a multiple of both {x} and {y}", lcm(*x, *y))
        }
    }
}

fn tags_of(family: FamilyId) -> Vec<String> {
    match family {
        FamilyId::FractionDivision => {
            vec!["Fractions".into(), "Divide a fraction by an integer".into()]
        }
        FamilyId::Squaring => {
            vec!["Squares, Cubes, etc".into(), "Calculate the square of a number".into()]
        }
        FamilyId::Lcm => vec![
            "Multiples and Lowest Common Multiple".into(),
            "Identify the lowest common multiple of two numbers".into(),
        ],
    }
}

/// Parameter pools are kept small on purpose: each value combination then
/// recurs under several stem phrasings, so the split by stem holds out
/// phrasing/value pairings rather than entirely unseen values.
fn sample_params<R: Rng>(family: FamilyId, rng: &mut R) -> StemParams {
    match family {
        FamilyId::FractionDivision => {
            // divisor divides both parts so the "divide both" action is clean
            loop {
                let a = rng.gen_range(2..=4i64);
                let b = rng.gen_range(2..=4i64);
                if a == b {
                    continue;
                }
                let c = rng.gen_range(2..=3i64);
                return StemParams::Fraction { num: c * a, den: c * b, divisor: c };
            }
        }
        FamilyId::Squaring => StemParams::Squaring { n: rng.gen_range(3..=14) },
        FamilyId::Lcm => loop {
            let x = rng.gen_range(4..=15i64);
            let y = rng.gen_range(4..=15i64);
            if x == y || gcd(x, y) < 2 || x % y == 0 || y % x == 0 {
                continue;
            }
            let (x, y) = (x.min(y), x.max(y));
            return StemParams::Lcm { x, y };
        },
    }
}

/// A generated MCQ plus the metadata needed by the ground-truth oracle.
#[derive(Debug, Clone)]
pub struct SynthItem {
    pub mcq: Mcq,
    pub family: FamilyId,
    pub params: StemParams,
    pub phrasing: usize,
    /// Rule id per distractor, aligned with `mcq.distractors`.
    pub rule_ids: Vec<&'static str>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub families: Vec<FamilyId>,
    pub n: usize,
    pub rules_per_item: usize,
    /// Fraction of error labels blanked out, in [0, 1].
    pub label_drop: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            families: FamilyId::all().to_vec(),
            n: 600,
            rules_per_item: 3,
            label_drop: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.families.is_empty() {
            return Err(Error::Config("at least one template family required".into()));
        }
        if self.n == 0 {
            return Err(Error::Config("n must be positive".into()));
        }
        if self.rules_per_item == 0 {
            return Err(Error::Config("rules_per_item must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.label_drop) {
            return Err(Error::Config("label_drop must lie in [0, 1]".into()));
        }
        for f in &self.families {
            if rules_of(*f).len() < self.rules_per_item {
                return Err(Error::Config(format!(
                    "family {} has fewer than {} applicable rules",
                    f.name(),
                    self.rules_per_item
                )));
            }
        }
        Ok(())
    }
}

fn mix_seed(seed: u64, a: u64, b: u64) -> u64 {
    seed ^ a.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ b.wrapping_mul(0xD1B5_4A32_D192_ED03)
}

const MAX_RETRIES: usize = 100;

fn build_item<R: Rng>(family: FamilyId, cfg: &SynthConfig, rng: &mut R) -> Option<SynthItem> {
    'retry: for _ in 0..MAX_RETRIES {
        let params = sample_params(family, rng);
        let phrasing = rng.gen_range(0..stem_phrasings(family).len());
        let mut rules: Vec<&ErrorRule> = rules_of(family).iter().collect();
        rules.shuffle(rng);
        rules.truncate(cfg.rules_per_item);

        let key = key_of(&params);
        let key_norm = normalize_text(&key);
        let mut answers: Vec<String> = Vec::with_capacity(rules.len());
        for rule in &rules {
            let Some(answer) = rule.apply(&params) else { continue 'retry };
            let norm = normalize_text(&answer);
            if norm == key_norm || answers.iter().any(|a| normalize_text(a) == norm) {
                continue 'retry; // rule collision: resample parameters
            }
            answers.push(answer);
        }

        let distractors: Vec<DistractorEntry> = rules
            .iter()
            .zip(&answers)
            .map(|(rule, answer)| {
                let keep = rng.gen::<f64>() >= cfg.label_drop;
                DistractorEntry {
                    answer: answer.clone(),
                    error: keep.then(|| rule.description.to_string()),
                }
            })
            .collect();
        let mcq = Mcq {
            stem: render_stem(family, &params, phrasing),
            key,
            explanation: Some(explanation_of(&params)),
            tags: tags_of(family),
            distractors,
        };
        debug_assert!(mcq.validate().is_ok());
        return Some(SynthItem {
            mcq,
            family,
            params,
            phrasing,
            rule_ids: rules.iter().map(|r| r.id).collect(),
        });
    }
    None
}

/// Generates `n` MCQs round-robin across the families. Deterministic given
/// the seed; items whose parameters keep colliding after bounded retries are
/// skipped with a warning.
pub fn generate_items(cfg: &SynthConfig) -> Result<Vec<SynthItem>> {
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.n);
    for i in 0..cfg.n {
        let family = cfg.families[i % cfg.families.len()];
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, 23, i as u64));
        match build_item(family, cfg, &mut rng) {
            Some(item) => out.push(item),
            None => {
                log::warn!("skipping item {i}: no collision-free rule set after {MAX_RETRIES} tries")
            }
        }
    }
    Ok(out)
}

pub fn generate_corpus(cfg: &SynthConfig) -> Result<Corpus> {
    let items = generate_items(cfg)?;
    Ok(Corpus::new(
        items.into_iter().map(|i| i.mcq).collect(),
        format!("synthetic:seed={}", cfg.seed),
    ))
}

/// The unique rule that generated this distractor for these stem parameters,
/// or None for the key and for foreign answers.
pub fn oracle_error_for(
    family: FamilyId,
    params: &StemParams,
    distractor: &str,
) -> Option<&'static ErrorRule> {
    let norm = normalize_text(distractor);
    if norm == normalize_text(&key_of(params)) {
        return None;
    }
    rules_of(family)
        .iter()
        .find(|rule| rule.apply(params).map(|a| normalize_text(&a)) == Some(norm.clone()))
}

/// Recovers stem parameters from a rendered stem by extracting the integer
/// runs (any phrasing of the family).
pub fn params_from_stem(family: FamilyId, stem: &str) -> Option<StemParams> {
    let mut ints: Vec<i64> = Vec::new();
    let mut current = String::new();
    for c in stem.chars() {
        if c.is_ascii_digit() {
            current.push(c);
        } else if !current.is_empty() {
            ints.push(current.parse().ok()?);
            current.clear();
        }
    }
    if !current.is_empty() {
        ints.push(current.parse().ok()?);
    }
    match family {
        FamilyId::FractionDivision => {
            let [num, den, divisor] = ints[..] else { return None };
            Some(StemParams::Fraction { num, den, divisor })
        }
        FamilyId::Squaring => {
            // first integer; the exponent 2 follows in the rendering
            let n = *ints.first()?;
            Some(StemParams::Squaring { n })
        }
        FamilyId::Lcm => {
            let [x, y] = ints[..] else { return None };
            Some(StemParams::Lcm { x, y })
        }
    }
}

/// Taxonomy manifest entry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaxonomyEntry {
    pub family: String,
    pub rule_id: String,
    pub description: String,
}

pub fn taxonomy(families: &[FamilyId]) -> Vec<TaxonomyEntry> {
    families
        .iter()
        .flat_map(|f| {
            rules_of(*f).iter().map(|r| TaxonomyEntry {
                family: r.family.name().into(),
                rule_id: r.id.into(),
                description: r.description.into(),
            })
        })
        .collect()
}

pub fn write_taxonomy(families: &[FamilyId], path: impl AsRef<std::path::Path>) -> Result<()> {
    let text = serde_json::to_string_pretty(&taxonomy(families))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

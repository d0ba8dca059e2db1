use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{hours_by_language, CorpusManifest};
use crate::error::{Error, Result};
use crate::seed;

/// Language used to top up capped multilingual sets.
pub const FILL_LANGUAGE: &str = "en";

const HOURS_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplingStrategy {
    Monolingual,
    MultilingualAll,
    MultilingualRe,
    MultilingualMh,
    LowResource,
    ExcludeLanguage,
    Pair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingPlan {
    pub strategy: SamplingStrategy,
    pub target_hours: f64,
    pub per_language_hours: BTreeMap<String, f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub excluded: Option<String>,
    pub seed: u64,
}

impl SamplingPlan {
    fn new(
        strategy: SamplingStrategy,
        per_language_hours: BTreeMap<String, f64>,
        excluded: Option<String>,
        seed: u64,
    ) -> Result<Self> {
        let plan = SamplingPlan {
            strategy,
            target_hours: per_language_hours.values().sum(),
            per_language_hours,
            excluded,
            seed,
        };
        plan.validate()?;
        Ok(plan)
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.target_hours.is_finite() && self.target_hours > 0.0) {
            return Err(Error::Budget("target hours must be positive".into()));
        }
        if self.per_language_hours.values().any(|h| !(h.is_finite() && *h >= 0.0)) {
            return Err(Error::Budget("per-language hours must be nonnegative".into()));
        }
        let sum: f64 = self.per_language_hours.values().sum();
        if (sum - self.target_hours).abs() > HOURS_TOL * self.target_hours.max(1.0) {
            return Err(Error::Budget(format!(
                "per-language hours sum to {sum} h, target is {} h",
                self.target_hours
            )));
        }
        if let Some(ex) = &self.excluded {
            if self.per_language_hours.get(ex).is_some_and(|h| *h > 0.0) {
                return Err(Error::Budget(format!("excluded language `{ex}` has hours")));
            }
        }
        Ok(())
    }
}

/// Draws clips of one language without replacement, in seeded random order,
/// until the accumulated duration first reaches `hours`. The result overshoots
/// the request by less than one clip. Records keep their manifest order.
pub fn sample_hours(
    manifest: &CorpusManifest,
    language: &str,
    hours: f64,
    seed: u64,
) -> Result<CorpusManifest> {
    if !(hours.is_finite() && hours >= 0.0) {
        return Err(Error::InvalidArgument(format!("requested hours {hours}")));
    }
    let name = format!("{}-{}-{:.4}h", manifest.name, language, hours);
    let pool: Vec<usize> = manifest
        .records
        .iter()
        .enumerate()
        .filter(|(_, r)| r.language == language)
        .map(|(i, _)| i)
        .collect();
    let available: f64 = pool.iter().map(|&i| manifest.records[i].hours()).sum();
    if hours > available + HOURS_TOL {
        return Err(Error::InsufficientHours {
            language: language.to_string(),
            requested: hours,
            available,
        });
    }
    let picked = pick(manifest, pool, hours, seed, language);
    Ok(manifest.derive(name, picked.into_iter().map(|i| manifest.records[i].clone()).collect()))
}

fn pick(
    manifest: &CorpusManifest,
    mut pool: Vec<usize>,
    hours: f64,
    seed: u64,
    language: &str,
) -> Vec<usize> {
    if hours <= 0.0 {
        return Vec::new();
    }
    let mut rng = seed::rng_for_id(seed, "sample_hours", language);
    pool.shuffle(&mut rng);
    let mut acc = 0.0;
    let mut picked = Vec::new();
    for i in pool {
        if acc >= hours - HOURS_TOL {
            break;
        }
        acc += manifest.records[i].hours();
        picked.push(i);
    }
    picked.sort_unstable();
    picked
}

/// Every clip of a single language, or a random `hours` subset of it.
pub fn plan_monolingual(
    manifest: &CorpusManifest,
    language: &str,
    hours: Option<f64>,
    seed: u64,
) -> Result<SamplingPlan> {
    let available = hours_by_language(manifest)
        .get(language)
        .copied()
        .unwrap_or(0.0);
    let h = hours.unwrap_or(available);
    if h > available + HOURS_TOL {
        return Err(Error::InsufficientHours {
            language: language.into(),
            requested: h,
            available,
        });
    }
    SamplingPlan::new(
        SamplingStrategy::Monolingual,
        BTreeMap::from([(language.to_string(), h)]),
        None,
        seed,
    )
}

/// All languages combined at their full hours.
pub fn plan_multilingual_all(manifest: &CorpusManifest, seed: u64) -> Result<SamplingPlan> {
    SamplingPlan::new(
        SamplingStrategy::MultilingualAll,
        hours_by_language(manifest),
        None,
        seed,
    )
}

fn capped_fill(
    hours: &BTreeMap<String, f64>,
    excluded: Option<&str>,
    total_hours: f64,
) -> Result<BTreeMap<String, f64>> {
    if !(total_hours.is_finite() && total_hours > 0.0) {
        return Err(Error::Budget("total hours must be positive".into()));
    }
    let others: BTreeMap<String, f64> = hours
        .iter()
        .filter(|(l, _)| l.as_str() != FILL_LANGUAGE && Some(l.as_str()) != excluded)
        .map(|(l, h)| (l.clone(), *h))
        .collect();
    let other_total: f64 = others.values().sum();

    if excluded == Some(FILL_LANGUAGE) {
        // Nothing to top up with: scale the remaining languages down to the cap.
        if other_total + HOURS_TOL < total_hours {
            return Err(Error::Budget(format!(
                "{other_total:.4} h remain after excluding `{FILL_LANGUAGE}`, {total_hours:.4} h requested"
            )));
        }
        let scale = total_hours / other_total;
        return Ok(others.into_iter().map(|(l, h)| (l, h * scale)).collect());
    }

    if other_total > total_hours + HOURS_TOL {
        return Err(Error::Budget(format!(
            "non-{FILL_LANGUAGE} languages hold {other_total:.4} h, above the {total_hours:.4} h cap"
        )));
    }
    let fill = (total_hours - other_total).max(0.0);
    let fill_available = hours.get(FILL_LANGUAGE).copied().unwrap_or(0.0);
    if fill > fill_available + HOURS_TOL {
        return Err(Error::Budget(format!(
            "need {fill:.4} h of `{FILL_LANGUAGE}` to reach {total_hours:.4} h, only {fill_available:.4} h available"
        )));
    }
    let mut plan = others;
    if fill > 0.0 {
        plan.insert(FILL_LANGUAGE.to_string(), fill.min(fill_available));
    }
    Ok(plan)
}

/// Reduced-English protocol: every non-English hour is kept and English clips
/// are added at random until the set reaches `total_hours`.
pub fn plan_multilingual_re(
    manifest: &CorpusManifest,
    total_hours: f64,
    seed: u64,
) -> Result<SamplingPlan> {
    let per = capped_fill(&hours_by_language(manifest), None, total_hours)?;
    SamplingPlan::new(SamplingStrategy::MultilingualRe, per, None, seed)
}

/// Matched-hours protocol: equal shares of every language summing to
/// `total_hours`. Availability is checked when the plan is materialized.
pub fn plan_multilingual_mh(languages: &[String], total_hours: f64) -> Result<SamplingPlan> {
    if languages.is_empty() {
        return Err(Error::Budget("no languages given".into()));
    }
    if !(total_hours.is_finite() && total_hours > 0.0) {
        return Err(Error::Budget("total hours must be positive".into()));
    }
    let share = total_hours / languages.len() as f64;
    let per = languages.iter().map(|l| (l.clone(), share)).collect();
    SamplingPlan::new(SamplingStrategy::MultilingualMh, per, None, 0)
}

/// Low-resource protocol: `hours` of one language, or `hours` split equally
/// across several.
pub fn plan_low_resource(languages: &[String], hours: f64, seed: u64) -> Result<SamplingPlan> {
    let mut plan = plan_multilingual_mh(languages, hours)?;
    plan.strategy = SamplingStrategy::LowResource;
    plan.seed = seed;
    Ok(plan)
}

/// Leave-one-language-out: the capped multilingual set without `excluded`,
/// topped up with English.
pub fn plan_exclude_language(
    manifest: &CorpusManifest,
    excluded: &str,
    total_hours: f64,
    seed: u64,
) -> Result<SamplingPlan> {
    let per = capped_fill(&hours_by_language(manifest), Some(excluded), total_hours)?;
    SamplingPlan::new(
        SamplingStrategy::ExcludeLanguage,
        per,
        Some(excluded.to_string()),
        seed,
    )
}

/// Related-language pair: all of `base` plus `added_hours` of `added`.
pub fn plan_pair(
    manifest: &CorpusManifest,
    base: &str,
    added: &str,
    added_hours: f64,
    seed: u64,
) -> Result<SamplingPlan> {
    if base == added {
        return Err(Error::InvalidArgument("pair languages must differ".into()));
    }
    let hours = hours_by_language(manifest);
    let base_h = hours.get(base).copied().unwrap_or(0.0);
    let added_available = hours.get(added).copied().unwrap_or(0.0);
    if added_hours > added_available + HOURS_TOL {
        return Err(Error::InsufficientHours {
            language: added.into(),
            requested: added_hours,
            available: added_available,
        });
    }
    SamplingPlan::new(
        SamplingStrategy::Pair,
        BTreeMap::from([(base.to_string(), base_h), (added.to_string(), added_hours)]),
        None,
        seed,
    )
}

/// Builds the manifest a plan describes. Languages planned at their full
/// availability take every clip; the rest are drawn with [`sample_hours`].
pub fn materialize(plan: &SamplingPlan, manifest: &CorpusManifest) -> Result<CorpusManifest> {
    plan.validate()?;
    let available = hours_by_language(manifest);
    let mut picked = Vec::new();
    for (language, &hours) in &plan.per_language_hours {
        if plan.excluded.as_deref() == Some(language.as_str()) || hours <= 0.0 {
            continue;
        }
        let have = available.get(language).copied().unwrap_or(0.0);
        if hours > have + HOURS_TOL {
            return Err(Error::InsufficientHours {
                language: language.clone(),
                requested: hours,
                available: have,
            });
        }
        let pool: Vec<usize> = manifest
            .records
            .iter()
            .enumerate()
            .filter(|(_, r)| &r.language == language)
            .map(|(i, _)| i)
            .collect();
        if hours >= have - HOURS_TOL {
            picked.extend(pool);
        } else {
            picked.extend(pick(manifest, pool, hours, plan.seed, language));
        }
    }
    picked.sort_unstable();
    let name = format!(
        "{}-{}",
        manifest.name,
        serde_json::to_value(plan.strategy)?
            .as_str()
            .unwrap_or("plan")
    );
    let out = manifest.derive(name, picked.into_iter().map(|i| manifest.records[i].clone()).collect());
    if let Some(ex) = &plan.excluded {
        debug_assert!(out.records.iter().all(|r| &r.language != ex));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::super::tests::rec;
    use super::*;

    /// One record per `clip_s` seconds until each language reaches its hours.
    fn corpus(spec: &[(&str, f64)], clip_s: f64) -> CorpusManifest {
        let mut records = Vec::new();
        for (lang, hours) in spec {
            let n = (hours * 3600.0 / clip_s).round() as usize;
            for i in 0..n {
                records.push(rec(&format!("{lang}{i}"), lang, clip_s));
            }
        }
        CorpusManifest::new("c", records).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn sample_hours_respects_budget_and_language() {
        let m = corpus(&[("es", 2.04), ("en", 1.0)], 36.0);
        let s = sample_hours(&m, "es", 0.3, 1).unwrap();
        let h = s.total_hours();
        assert!(h >= 0.3 - 1e-9 && h < 0.3 + 0.01, "{h}");
        assert!(s.records.iter().all(|r| r.language == "es"));
        let again = sample_hours(&m, "es", 0.3, 1).unwrap();
        assert_eq!(s.records, again.records);
        let other = sample_hours(&m, "es", 0.3, 2).unwrap();
        assert_ne!(s.records, other.records);
    }

    #[test]
    fn sample_zero_hours_is_empty() {
        let m = corpus(&[("es", 0.5)], 36.0);
        assert!(sample_hours(&m, "es", 0.0, 3).unwrap().is_empty());
    }

    #[test]
    fn sample_more_than_available_fails() {
        let m = corpus(&[("zh", 0.65)], 36.0);
        match sample_hours(&m, "zh", 3.0, 3).unwrap_err() {
            Error::InsufficientHours {
                requested,
                available,
                ..
            } => {
                assert_eq!(requested, 3.0);
                assert!(close(available, 0.65, 1e-9));
            }
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn re_plan_on_avspeech_proportions() {
        // Same language mix as the full pre-training corpus, scaled down 1000x.
        let m = corpus(
            &[
                ("en", 1.333),
                ("pt", 0.337),
                ("es", 0.204),
                ("fr", 0.117),
                ("it", 0.068),
                ("zh", 0.065),
            ],
            3.6,
        );
        let plan = plan_multilingual_re(&m, 1.333, 5).unwrap();
        assert!(close(plan.per_language_hours["en"], 0.542, 1e-9));
        let others: f64 = plan
            .per_language_hours
            .iter()
            .filter(|(l, _)| l.as_str() != "en")
            .map(|(_, h)| h)
            .sum();
        assert!(close(others, 0.791, 1e-9));
    }

    #[test]
    fn re_plan_english_only() {
        let m = corpus(&[("en", 20.0)], 36.0);
        let plan = plan_multilingual_re(&m, 10.0, 0).unwrap();
        assert_eq!(plan.per_language_hours.len(), 1);
        assert!(close(plan.per_language_hours["en"], 10.0, 1e-9));
    }

    #[test]
    fn re_plan_rejects_cap_below_non_english() {
        let m = corpus(&[("en", 1.0), ("pt", 0.5), ("es", 0.29)], 36.0);
        assert!(matches!(
            plan_multilingual_re(&m, 0.7, 0),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn re_with_full_total_takes_every_record() {
        let m = corpus(&[("en", 0.4), ("pt", 0.2), ("es", 0.1)], 36.0);
        let plan = plan_multilingual_re(&m, m.total_hours(), 9).unwrap();
        let out = materialize(&plan, &m).unwrap();
        assert_eq!(out.records, m.records);
    }

    #[test]
    fn mh_splits_equally() {
        let langs: Vec<String> = ["en", "it", "pt", "fr", "es", "zh"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        let p = plan_multilingual_mh(&langs, 204.0).unwrap();
        assert!(p.per_language_hours.values().all(|h| close(*h, 34.0, 1e-12)));
        let p = plan_multilingual_mh(&langs, 30.0).unwrap();
        assert!(p.per_language_hours.values().all(|h| close(*h, 5.0, 1e-12)));
        let p = plan_multilingual_mh(&langs[..1], 30.0).unwrap();
        assert!(close(p.per_language_hours["en"], 30.0, 1e-12));
    }

    #[test]
    fn mh_materialization_fails_when_a_language_is_short() {
        let m = corpus(&[("en", 1.0), ("zh", 0.1)], 36.0);
        let plan = plan_multilingual_mh(&["en".into(), "zh".into()], 0.6).unwrap();
        assert!(matches!(
            materialize(&plan, &m),
            Err(Error::InsufficientHours { .. })
        ));
    }

    #[test]
    fn exclude_language_drops_it_and_tops_up_english() {
        let m = corpus(&[("en", 1.0), ("pt", 0.3), ("es", 0.2), ("fr", 0.1)], 36.0);
        let plan = plan_exclude_language(&m, "pt", 0.9, 4).unwrap();
        assert!(!plan.per_language_hours.contains_key("pt"));
        assert!(close(plan.per_language_hours["es"], 0.2, 1e-9));
        assert!(close(plan.per_language_hours["en"], 0.6, 1e-9));
        let out = materialize(&plan, &m).unwrap();
        assert!(out.records.iter().all(|r| r.language != "pt"));
        let got = hours_by_language(&out);
        assert!((got["en"] - 0.6).abs() <= 0.01 + 1e-9);
    }

    #[test]
    fn excluding_absent_language_matches_re() {
        let m = corpus(&[("en", 1.0), ("pt", 0.3)], 36.0);
        let a = plan_exclude_language(&m, "it", 0.9, 4).unwrap();
        let b = plan_multilingual_re(&m, 0.9, 4).unwrap();
        assert_eq!(a.per_language_hours, b.per_language_hours);
        assert_eq!(materialize(&a, &m).unwrap().records, materialize(&b, &m).unwrap().records);
    }

    #[test]
    fn excluding_english_without_enough_others_fails() {
        let m = corpus(&[("en", 1.0), ("pt", 0.3)], 36.0);
        assert!(matches!(
            plan_exclude_language(&m, "en", 0.9, 4),
            Err(Error::Budget(_))
        ));
    }

    #[test]
    fn pair_plan_takes_all_base_and_some_added() {
        let m = corpus(&[("es", 0.204), ("pt", 0.337)], 3.6);
        let plan = plan_pair(&m, "es", "pt", 0.065, 2).unwrap();
        let out = materialize(&plan, &m).unwrap();
        let h = hours_by_language(&out);
        assert!(close(h["es"], 0.204, 1e-9));
        assert!(h["pt"] >= 0.065 - 1e-9 && h["pt"] <= 0.065 + 0.001 + 1e-9);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(48))]
            #[test]
            fn materialized_plans_stay_within_one_clip(
                durs in proptest::collection::vec(1.0f64..60.0, 10..80),
                frac in 0.05f64..0.95,
                seed in 0u64..1000,
            ) {
                let records: Vec<_> = durs.iter().enumerate().map(|(i, d)| {
                    let lang = ["en", "pt", "es"][i % 3];
                    rec(&format!("r{i}"), lang, *d)
                }).collect();
                let m = CorpusManifest::new("m", records).unwrap();
                let max_clip = m.max_clip_hours();
                let hours = hours_by_language(&m);
                let min_h = hours.values().cloned().fold(f64::INFINITY, f64::min);
                let plan = plan_multilingual_mh(&m.languages(), min_h * 3.0 * frac)
                    .unwrap().with_seed(seed);
                let out = materialize(&plan, &m).unwrap();
                let got = hours_by_language(&out);
                for (lang, planned) in &plan.per_language_hours {
                    let achieved = got.get(lang).copied().unwrap_or(0.0);
                    prop_assert!((achieved - planned).abs() <= max_clip + 1e-9);
                }
                let again = materialize(&plan, &m).unwrap();
                prop_assert_eq!(out.to_jsonl(std::path::Path::new(".")).unwrap(),
                                again.to_jsonl(std::path::Path::new(".")).unwrap());
            }
        }
    }
}

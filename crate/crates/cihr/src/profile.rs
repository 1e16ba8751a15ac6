//! Static-profile feature handling: raw attribute schema and the
//! train-split feature normalizer (z-scored numerics, one-hot categoricals
//! with explicit missing/unknown buckets).

use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Gender {
    Female,
    Male,
    Unknown,
}

impl Gender {
    pub fn parse(s: &str) -> Gender {
        match s.to_ascii_lowercase().as_str() {
            "female" | "f" => Gender::Female,
            "male" | "m" => Gender::Male,
            _ => Gender::Unknown,
        }
    }
}

#[derive(Clone, Debug)]
pub struct StaticProfileRaw {
    pub description: String,
    pub gender: Gender,
    pub age: Option<f64>,
    pub region: String,
}

pub const SIGMA_FLOOR: f64 = 1e-6;

/// Fitted once on training users only. Layout of the feature vector:
/// `[age_z, age_missing, gender one-hot (3), region one-hot (R), region
/// unknown]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureNormalizer {
    pub age_mean: f64,
    pub age_std: f64,
    pub regions: Vec<String>,
}

impl FeatureNormalizer {
    pub fn fit<'a>(profiles: impl Iterator<Item = &'a StaticProfileRaw> + Clone) -> Self {
        let ages: Vec<f64> = profiles
            .clone()
            .filter_map(|p| p.age)
            .collect();
        let (mean, std) = if ages.is_empty() {
            (0.0, SIGMA_FLOOR)
        } else {
            let mean = ages.iter().sum::<f64>() / ages.len() as f64;
            let var =
                ages.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / ages.len() as f64;
            (mean, var.sqrt().max(SIGMA_FLOOR))
        };
        let mut regions: Vec<String> = profiles.map(|p| p.region.clone()).collect();
        regions.sort();
        regions.dedup();
        FeatureNormalizer {
            age_mean: mean,
            age_std: std,
            regions,
        }
    }

    /// Total feature width d''.
    pub fn width(&self) -> usize {
        2 + 3 + self.regions.len() + 1
    }

    pub fn featurize(&self, p: &StaticProfileRaw) -> Vec<f64> {
        let mut v = vec![0.0; self.width()];
        match p.age {
            Some(age) => v[0] = (age - self.age_mean) / self.age_std,
            None => v[1] = 1.0, // missing flag, z-slot stays 0
        }
        let g = match p.gender {
            Gender::Female => 0,
            Gender::Male => 1,
            Gender::Unknown => 2,
        };
        v[2 + g] = 1.0;
        let base = 5;
        match self.regions.binary_search(&p.region) {
            Ok(i) => v[base + i] = 1.0,
            Err(_) => v[base + self.regions.len()] = 1.0, // unknown bucket
        }
        v
    }

    /// Compact serialization for checkpoint headers.
    pub fn to_header_string(&self) -> String {
        format!(
            "age_mean={};age_std={};regions={}",
            self.age_mean,
            self.age_std,
            self.regions.join(",")
        )
    }

    pub fn from_header_string(s: &str) -> Option<FeatureNormalizer> {
        let mut age_mean = None;
        let mut age_std = None;
        let mut regions = Vec::new();
        for part in s.split(';') {
            let (k, v) = part.split_once('=')?;
            match k {
                "age_mean" => age_mean = v.parse().ok(),
                "age_std" => age_std = v.parse().ok(),
                "regions" => {
                    regions = if v.is_empty() {
                        Vec::new()
                    } else {
                        v.split(',').map(|s| s.to_string()).collect()
                    }
                }
                _ => return None,
            }
        }
        Some(FeatureNormalizer {
            age_mean: age_mean?,
            age_std: age_std?,
            regions,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn profile(age: Option<f64>, gender: Gender, region: &str) -> StaticProfileRaw {
        StaticProfileRaw {
            description: String::new(),
            gender,
            age,
            region: region.to_string(),
        }
    }

    #[test]
    fn z_score_of_mean_is_zero() {
        let ps = vec![
            profile(Some(20.0), Gender::Female, "north"),
            profile(Some(40.0), Gender::Male, "south"),
        ];
        let norm = FeatureNormalizer::fit(ps.iter());
        let v = norm.featurize(&profile(Some(30.0), Gender::Female, "north"));
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 0.0);
    }

    #[test]
    fn z_score_two_sigma() {
        let ps = vec![
            profile(Some(20.0), Gender::Female, "a"),
            profile(Some(40.0), Gender::Male, "a"),
        ];
        let norm = FeatureNormalizer::fit(ps.iter());
        // mean 30, population std 10
        let v = norm.featurize(&profile(Some(50.0), Gender::Female, "a"));
        assert!((v[0] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn missing_age_sets_flag() {
        let ps = vec![profile(Some(30.0), Gender::Female, "a")];
        let norm = FeatureNormalizer::fit(ps.iter());
        let v = norm.featurize(&profile(None, Gender::Female, "a"));
        assert_eq!(v[0], 0.0);
        assert_eq!(v[1], 1.0);
    }

    #[test]
    fn unknown_region_maps_to_reserved_bucket() {
        let ps = vec![
            profile(Some(30.0), Gender::Female, "a"),
            profile(Some(30.0), Gender::Female, "b"),
        ];
        let norm = FeatureNormalizer::fit(ps.iter());
        let v = norm.featurize(&profile(Some(30.0), Gender::Male, "never-seen"));
        let base = 5;
        assert_eq!(v[base + norm.regions.len()], 1.0);
        assert!(v[base..base + norm.regions.len()].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn one_hot_layout_widths() {
        let ps = vec![
            profile(Some(30.0), Gender::Female, "a"),
            profile(Some(30.0), Gender::Male, "b"),
            profile(None, Gender::Unknown, "c"),
        ];
        let norm = FeatureNormalizer::fit(ps.iter());
        assert_eq!(norm.width(), 2 + 3 + 3 + 1);
        for p in &ps {
            let v = norm.featurize(p);
            assert_eq!(v.len(), norm.width());
            let gender_sum: f64 = v[2..5].iter().sum();
            assert_eq!(gender_sum, 1.0);
        }
    }

    #[test]
    fn fit_is_deterministic_and_train_only() {
        let train = vec![
            profile(Some(20.0), Gender::Female, "b"),
            profile(Some(40.0), Gender::Male, "a"),
        ];
        let n1 = FeatureNormalizer::fit(train.iter());
        let n2 = FeatureNormalizer::fit(train.iter());
        assert_eq!(n1, n2);
        assert_eq!(n1.regions, vec!["a".to_string(), "b".to_string()]);
    }

    #[test]
    fn header_string_roundtrip() {
        let ps = vec![
            profile(Some(25.0), Gender::Female, "east"),
            profile(Some(35.0), Gender::Male, "west"),
        ];
        let norm = FeatureNormalizer::fit(ps.iter());
        let s = norm.to_header_string();
        let back = FeatureNormalizer::from_header_string(&s).unwrap();
        assert_eq!(norm, back);
    }
}

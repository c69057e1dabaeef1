//! Slide-level cohort splitting and MIL bag construction.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::{BufRead, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::AlnLabel;

/// Size of a cohort carved out of a pool of slides.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CohortSize {
    /// `floor(pool * ratio)` slides.
    Ratio(f64),
    /// An exact slide count.
    Count(usize),
}

impl CohortSize {
    fn resolve(self, pool: usize) -> Result<usize> {
        match self {
            CohortSize::Ratio(r) if (0.0..1.0).contains(&r) => {
                Ok(((pool as f64) * r + 1e-9).floor() as usize)
            }
            CohortSize::Ratio(r) => Err(Error::invalid(format!("cohort ratio {r} outside [0, 1)"))),
            CohortSize::Count(c) if c < pool => Ok(c),
            CohortSize::Count(c) => Err(Error::invalid(format!(
                "cohort count {c} leaves nothing of a {pool}-slide pool"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub test: CohortSize,
    pub val_of_train: CohortSize,
    pub seed: u64,
    pub stratify: bool,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            test: CohortSize::Ratio(0.2),
            val_of_train: CohortSize::Ratio(0.25),
            seed: 0,
            stratify: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Cohort {
    Train,
    Val,
    Test,
}

impl Cohort {
    pub fn as_str(self) -> &'static str {
        match self {
            Cohort::Train => "train",
            Cohort::Val => "val",
            Cohort::Test => "test",
        }
    }
}

impl std::str::FromStr for Cohort {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" | "t" => Ok(Cohort::Train),
            "val" | "validation" | "v" => Ok(Cohort::Val),
            "test" | "i-t" => Ok(Cohort::Test),
            other => Err(Error::invalid(format!("unknown cohort `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CohortSplit {
    pub train: Vec<String>,
    pub val: Vec<String>,
    pub test: Vec<String>,
}

impl CohortSplit {
    pub fn assignment(&self) -> HashMap<String, Cohort> {
        let mut m = HashMap::new();
        for (ids, c) in [
            (&self.train, Cohort::Train),
            (&self.val, Cohort::Val),
            (&self.test, Cohort::Test),
        ] {
            m.extend(ids.iter().map(|id| (id.clone(), c)));
        }
        m
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| Error::csv(path, e))?;
        w.write_record(["slide_id", "cohort"])
            .map_err(|e| Error::csv(path, e))?;
        for (ids, c) in [
            (&self.train, Cohort::Train),
            (&self.val, Cohort::Val),
            (&self.test, Cohort::Test),
        ] {
            for id in ids {
                w.write_record([id.as_str(), c.as_str()])
                    .map_err(|e| Error::csv(path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut reader = csv::Reader::from_path(path).map_err(|e| Error::csv(path, e))?;
        let mut split = CohortSplit::default();
        for rec in reader.records() {
            let rec = rec.map_err(|e| Error::csv(path, e))?;
            let id = rec.get(0).unwrap_or_default().to_string();
            match rec.get(1).unwrap_or_default().parse::<Cohort>()? {
                Cohort::Train => split.train.push(id),
                Cohort::Val => split.val.push(id),
                Cohort::Test => split.test.push(id),
            }
        }
        Ok(split)
    }
}

/// Draws `size` slides from `pool`, stratified by class when requested.
/// Returns `(chosen, remainder)`.
fn draw(
    pool: Vec<(String, bool)>,
    size: CohortSize,
    stratify: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(Vec<String>, Vec<(String, bool)>)> {
    let k = size.resolve(pool.len())?;
    let mut chosen = HashSet::new();
    if stratify {
        let mut classes: BTreeMap<bool, Vec<String>> = BTreeMap::new();
        for (id, positive) in &pool {
            classes.entry(*positive).or_default().push(id.clone());
        }
        if classes.len() < 2 {
            return Err(Error::invalid("stratified split needs both classes"));
        }
        if let Some((positive, ids)) = classes.iter().find(|(_, ids)| ids.len() < 3) {
            return Err(Error::invalid(format!(
                "class {} has {} slides; stratification needs at least 3",
                if *positive { "N+" } else { "N0" },
                ids.len()
            )));
        }
        // largest-remainder allocation of k across classes
        let n = pool.len() as f64;
        let mut quotas: Vec<(bool, usize, f64)> = classes
            .iter()
            .map(|(c, ids)| {
                let exact = k as f64 * ids.len() as f64 / n;
                (*c, exact.floor() as usize, exact - exact.floor())
            })
            .collect();
        let mut left = k - quotas.iter().map(|q| q.1).sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| quotas[b].2.total_cmp(&quotas[a].2).then(a.cmp(&b)));
        for i in order {
            if left == 0 {
                break;
            }
            quotas[i].1 += 1;
            left -= 1;
        }
        for (class, quota, _) in quotas {
            let mut ids = classes.remove(&class).unwrap_or_default();
            ids.shuffle(rng);
            chosen.extend(ids.into_iter().take(quota));
        }
    } else {
        let mut ids: Vec<String> = pool.iter().map(|(id, _)| id.clone()).collect();
        ids.shuffle(rng);
        chosen.extend(ids.into_iter().take(k));
    }
    let (picked, rest): (Vec<_>, Vec<_>) =
        pool.into_iter().partition(|(id, _)| chosen.contains(id));
    let mut picked: Vec<String> = picked.into_iter().map(|(id, _)| id).collect();
    picked.sort();
    Ok((picked, rest))
}

/// Splits slides into disjoint train / validation / test cohorts.
///
/// The test cohort is drawn first from all slides, the validation cohort
/// from the remaining pool. Input order does not matter: slides are sorted by
/// id before any random draw, so a fixed seed always yields the same split.
pub fn split_cohorts(slides: &[(String, AlnLabel)], cfg: &SplitConfig) -> Result<CohortSplit> {
    if slides.len() < 5 {
        return Err(Error::invalid(format!(
            "need at least 5 slides to split, got {}",
            slides.len()
        )));
    }
    let mut pool: Vec<(String, bool)> = slides
        .iter()
        .map(|(id, l)| (id.clone(), l.is_positive()))
        .collect();
    pool.sort();
    if pool.windows(2).any(|w| w[0].0 == w[1].0) {
        return Err(Error::invalid("duplicate slide ids in split input"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (test, pool) = draw(pool, cfg.test, cfg.stratify, &mut rng)?;
    let (val, rest) = draw(pool, cfg.val_of_train, cfg.stratify, &mut rng)?;
    let train = rest.into_iter().map(|(id, _)| id).collect();
    Ok(CohortSplit { train, val, test })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BagConfig {
    /// Instances per bag (N).
    pub instances: usize,
    /// Bags per slide (M); `None` picks `ceil(patches / N)` clipped to [1, 100].
    pub bags_per_slide: Option<usize>,
    pub seed: u64,
    pub attach_clinical: bool,
}

impl Default for BagConfig {
    fn default() -> Self {
        BagConfig {
            instances: 10,
            bags_per_slide: None,
            seed: 0,
            attach_clinical: false,
        }
    }
}

impl BagConfig {
    pub fn validate(&self) -> Result<()> {
        if self.instances == 0 {
            return Err(Error::invalid("instances per bag must be >= 1"));
        }
        if self.bags_per_slide == Some(0) {
            return Err(Error::invalid("bags per slide must be >= 1"));
        }
        Ok(())
    }

    pub fn bags_for(&self, patch_count: usize) -> usize {
        self.bags_per_slide
            .unwrap_or_else(|| patch_count.div_ceil(self.instances).clamp(1, 100))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bag {
    pub bag_id: String,
    pub slide_id: String,
    pub instance_refs: Vec<String>,
    pub clinical_vec: Option<Vec<f64>>,
    pub label: Option<AlnLabel>,
}

/// FNV-1a; stable across platforms and releases, unlike `DefaultHasher`.
pub(crate) fn stable_hash(s: &str) -> u64 {
    s.bytes().fold(0xcbf2_9ce4_8422_2325u64, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

pub(crate) fn slide_rng(seed: u64, slide_id: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ stable_hash(slide_id))
}

/// Builds the M bags of one slide.
///
/// Sampling is without replacement when the slide has at least N patches and
/// with replacement otherwise. A slide with no patches yields no bags.
pub fn build_bags(
    slide_id: &str,
    patch_refs: &[String],
    label: Option<AlnLabel>,
    clinical_vec: Option<&[f64]>,
    cfg: &BagConfig,
) -> Result<Vec<Bag>> {
    cfg.validate()?;
    if patch_refs.is_empty() {
        log::warn!("slide `{slide_id}` excluded: no patches");
        return Ok(Vec::new());
    }
    if cfg.attach_clinical && clinical_vec.is_none() {
        return Err(Error::invalid(format!(
            "slide `{slide_id}` has no clinical vector to attach"
        )));
    }
    let n = cfg.instances;
    let with_replacement = patch_refs.len() < n;
    if with_replacement {
        log::warn!(
            "slide `{slide_id}` has {} patches < N = {n}; sampling with replacement",
            patch_refs.len()
        );
    }
    let mut rng = slide_rng(cfg.seed, slide_id);
    let bags = (0..cfg.bags_for(patch_refs.len()))
        .map(|m| {
            let picks: Vec<usize> = if with_replacement {
                (0..n)
                    .map(|_| rng.random_range(0..patch_refs.len()))
                    .collect()
            } else {
                rand::seq::index::sample(&mut rng, patch_refs.len(), n).into_vec()
            };
            Bag {
                bag_id: format!("{slide_id}#{m}"),
                slide_id: slide_id.to_string(),
                instance_refs: picks.into_iter().map(|i| patch_refs[i].clone()).collect(),
                clinical_vec: if cfg.attach_clinical {
                    clinical_vec.map(<[f64]>::to_vec)
                } else {
                    None
                },
                label,
            }
        })
        .collect();
    Ok(bags)
}

pub fn write_bags_jsonl(path: &Path, bags: &[Bag]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for bag in bags {
        serde_json::to_writer(&mut w, bag).map_err(|e| Error::json(path, e))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_bags_jsonl(path: &Path) -> Result<Vec<Bag>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut bags = Vec::new();
    for line in std::io::BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        bags.push(serde_json::from_str(&line).map_err(|e| Error::json(path, e))?);
    }
    Ok(bags)
}

/// Groups bags by slide, preserving first-seen slide order.
pub fn group_by_slide(bags: &[Bag]) -> Vec<(String, Vec<&Bag>)> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<&str, Vec<&Bag>> = HashMap::new();
    for bag in bags {
        let entry = groups.entry(bag.slide_id.as_str()).or_default();
        if entry.is_empty() {
            order.push(bag.slide_id.clone());
        }
        entry.push(bag);
    }
    order
        .into_iter()
        .map(|id| {
            let g = groups.remove(id.as_str()).unwrap_or_default();
            (id, g)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slides(neg: usize, pos: usize) -> Vec<(String, AlnLabel)> {
        (0..neg)
            .map(|i| (format!("n{i:04}"), AlnLabel::N0))
            .chain((0..pos).map(|i| (format!("p{i:04}"), AlnLabel::Low)))
            .collect()
    }

    #[test]
    fn ratio_split_sizes() {
        let s = split_cohorts(&slides(600, 400), &SplitConfig::default()).unwrap();
        assert_eq!(s.test.len(), 200);
        assert_eq!(s.val.len(), 200);
        assert_eq!(s.train.len(), 600);
        // class balance in test within one slide per class of the quota
        let pos = s.test.iter().filter(|id| id.starts_with('p')).count();
        assert!((pos as i64 - 80).abs() <= 1);
    }

    #[test]
    fn partitions_are_disjoint_and_exhaustive() {
        let all = slides(37, 23);
        let s = split_cohorts(
            &all,
            &SplitConfig {
                seed: 9,
                ..Default::default()
            },
        )
        .unwrap();
        let mut ids: Vec<_> = s
            .train
            .iter()
            .chain(&s.val)
            .chain(&s.test)
            .cloned()
            .collect();
        ids.sort();
        let mut expected: Vec<_> = all.iter().map(|(id, _)| id.clone()).collect();
        expected.sort();
        assert_eq!(ids, expected);
    }

    #[test]
    fn small_class_cannot_be_stratified() {
        let err = split_cohorts(&slides(3, 2), &SplitConfig::default());
        assert!(err.is_err());
        let cfg = SplitConfig {
            stratify: false,
            seed: 4,
            ..Default::default()
        };
        let a = split_cohorts(&slides(3, 2), &cfg).unwrap();
        let b = split_cohorts(&slides(3, 2), &cfg).unwrap();
        assert_eq!(a, b);
        assert_eq!((a.train.len(), a.val.len(), a.test.len()), (3, 1, 1));
    }

    #[test]
    fn split_ignores_input_order() {
        let mut all = slides(20, 15);
        let a = split_cohorts(&all, &SplitConfig::default()).unwrap();
        all.reverse();
        let b = split_cohorts(&all, &SplitConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn without_replacement_regime() {
        let refs: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let cfg = BagConfig {
            instances: 10,
            bags_per_slide: Some(4),
            ..Default::default()
        };
        let bags = build_bags("s", &refs, Some(AlnLabel::High), None, &cfg).unwrap();
        assert_eq!(bags.len(), 4);
        for bag in &bags {
            assert_eq!(bag.instance_refs.len(), 10);
            let uniq: HashSet<_> = bag.instance_refs.iter().collect();
            assert_eq!(uniq.len(), 10);
            assert_eq!(bag.label, Some(AlnLabel::High));
        }
    }

    #[test]
    fn clinical_vector_is_copied() {
        let refs: Vec<String> = (0..5).map(|i| format!("p{i}")).collect();
        let clin = vec![0.5, -1.0, 1.0];
        let cfg = BagConfig {
            instances: 3,
            bags_per_slide: Some(3),
            attach_clinical: true,
            ..Default::default()
        };
        let bags = build_bags("s", &refs, None, Some(&clin), &cfg).unwrap();
        assert!(bags
            .iter()
            .all(|b| b.clinical_vec.as_deref() == Some(clin.as_slice())));
    }

    #[test]
    fn default_bag_count() {
        let cfg = BagConfig::default();
        assert_eq!(cfg.bags_for(1), 1);
        assert_eq!(cfg.bags_for(25), 3);
        assert_eq!(cfg.bags_for(5000), 100);
    }

    #[test]
    fn empty_slide_is_excluded() {
        let bags = build_bags("s", &[], None, None, &BagConfig::default()).unwrap();
        assert!(bags.is_empty());
    }

    #[test]
    fn reseeding_reproduces_bags() {
        let refs: Vec<String> = (0..23).map(|i| format!("p{i}")).collect();
        let cfg = BagConfig {
            seed: 77,
            ..Default::default()
        };
        let a = build_bags("slide-a", &refs, None, None, &cfg).unwrap();
        let b = build_bags("slide-a", &refs, None, None, &cfg).unwrap();
        assert_eq!(a, b);
        let c = build_bags("slide-a", &refs, None, None, &BagConfig { seed: 78, ..cfg }).unwrap();
        assert_ne!(a, c);
    }
}

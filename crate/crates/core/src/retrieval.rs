//! Resolution-adaptive ranking and the MLR evaluation protocol.
//!
//! A query at level `k` is compared with only the first `k` sub-vectors of
//! each full-resolution gallery embedding, using plain squared Euclidean
//! distance.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use num_traits::One;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{degrade, make_mlr_query_gallery, normalize, IdentityImageRecord};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::layout::{EmbeddingLayout, VaryingLengthEmbedding};
use crate::resolution::{resolve_unseen_resolution, Rational, ResolutionLevel};
use crate::scalar::Scalar;
use crate::state::ModelState;

/// `||cat(v^p_1..v^p_k) - cat(v^g_1..v^g_k)||^2` for a level-`k` query.
pub fn cross_res_distance<T: Scalar>(
    query: &VaryingLengthEmbedding<T>,
    gallery: &VaryingLengthEmbedding<T>,
) -> Result<T> {
    let k = query.level().index();
    let (qs, gs) = (query.subvectors(), gallery.subvectors());
    if k > gs.len() {
        return Err(Error::shape(format!(
            "query at level {k} against a gallery embedding with {} sub-vectors",
            gs.len()
        )));
    }
    let mut acc = T::zero();
    for (q, g) in qs.iter().zip(gs) {
        if q.len() != g.len() {
            return Err(Error::shape(format!(
                "sub-vector lengths differ ({} vs {})",
                q.len(),
                g.len()
            )));
        }
        for (&a, &b) in q.iter().zip(g) {
            let diff = a - b;
            acc += diff * diff;
        }
    }
    Ok(acc)
}

fn unit<T: Scalar>(v: Vec<T>) -> Vec<T> {
    let norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
    if norm > T::zero() {
        v.into_iter().map(|x| x / norm).collect()
    } else {
        v
    }
}

/// Distance between L2-normalized query and gallery prefixes.
pub fn normalized_distance<T: Scalar>(
    query: &VaryingLengthEmbedding<T>,
    gallery: &VaryingLengthEmbedding<T>,
) -> Result<T> {
    cross_res_distance(query, gallery)?;
    let k = query.level().index();
    let q = unit(query.concat());
    let g = unit(gallery.prefix(k));
    Ok(q.iter().zip(&g).map(|(&a, &b)| (a - b) * (a - b)).sum())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedList<T> {
    pub query_id: String,
    /// Gallery ids, nearest first.
    pub gallery_ids: Vec<String>,
    /// Gallery indices in ranked order.
    pub order: Vec<usize>,
    pub distances: Vec<T>,
}

/// Sort the gallery by distance to `query`; equal distances keep gallery-id
/// order.
pub fn rank<T: Scalar>(
    query_id: &str,
    query: &VaryingLengthEmbedding<T>,
    gallery: &[(String, VaryingLengthEmbedding<T>)],
    l2_normalize: bool,
) -> Result<RankedList<T>> {
    if gallery.is_empty() {
        return Err(Error::domain("cannot rank against an empty gallery"));
    }
    let mut scored = Vec::with_capacity(gallery.len());
    for (i, (_, g)) in gallery.iter().enumerate() {
        let d = if l2_normalize {
            normalized_distance(query, g)?
        } else {
            cross_res_distance(query, g)?
        };
        scored.push((d, i));
    }
    scored.sort_by(|a, b| {
        a.0.partial_cmp(&b.0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| gallery[a.1].0.cmp(&gallery[b.1].0))
    });
    Ok(RankedList {
        query_id: query_id.to_string(),
        gallery_ids: scored.iter().map(|&(_, i)| gallery[i].0.clone()).collect(),
        order: scored.iter().map(|&(_, i)| i).collect(),
        distances: scored.iter().map(|&(d, _)| d).collect(),
    })
}

/// CMC curve and mAP for one set of ranked lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialResult {
    pub seed: u64,
    /// `cmc[K-1]`: fraction of queries whose first match is within rank `K`.
    pub cmc: Vec<f64>,
    pub map: f64,
    pub queries: usize,
    /// Queries without any gallery match, left out of the averages.
    pub excluded: Vec<String>,
}

impl TrialResult {
    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc.is_empty() {
            return 0.0;
        }
        self.cmc[(k.max(1) - 1).min(self.cmc.len() - 1)]
    }
}

/// Uninterpolated average precision over the full ranked list.
pub fn average_precision(relevant: &[bool]) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, &r) in relevant.iter().enumerate() {
        if r {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    if hits == 0 {
        0.0
    } else {
        sum / hits as f64
    }
}

/// CMC and mAP of `lists` (one per query, in the same order as
/// `query_identities`).
pub fn cmc_map<T>(
    lists: &[RankedList<T>],
    query_identities: &[u32],
    gallery_identities: &HashMap<String, u32>,
) -> Result<TrialResult> {
    if lists.len() != query_identities.len() {
        return Err(Error::shape("one identity per ranked list is required"));
    }
    let width = lists.iter().map(|l| l.gallery_ids.len()).max().unwrap_or(0);
    let mut hits = vec![0usize; width];
    let mut ap_sum = 0.0;
    let mut counted = 0usize;
    let mut excluded = Vec::new();
    for (list, &identity) in lists.iter().zip(query_identities) {
        let relevant = list
            .gallery_ids
            .iter()
            .map(|id| {
                gallery_identities
                    .get(id)
                    .map(|&g| g == identity)
                    .ok_or_else(|| Error::Data(format!("gallery id {id} has no identity")))
            })
            .collect::<Result<Vec<bool>>>()?;
        let Some(first) = relevant.iter().position(|&r| r) else {
            excluded.push(list.query_id.clone());
            continue;
        };
        hits[first] += 1;
        ap_sum += average_precision(&relevant);
        counted += 1;
    }
    let mut cmc = Vec::with_capacity(width);
    let mut running = 0usize;
    for h in hits {
        running += h;
        cmc.push(if counted == 0 { 0.0 } else { running as f64 / counted as f64 });
    }
    Ok(TrialResult {
        seed: 0,
        cmc,
        map: if counted == 0 { 0.0 } else { ap_sum / counted as f64 },
        queries: counted,
        excluded,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalOptions {
    /// Query down-sampling rates, drawn uniformly per query.
    pub rates: Vec<u32>,
    pub trials: usize,
    pub master_seed: u64,
    /// CMC ranks printed in the report.
    pub ranks: Vec<usize>,
    pub l2_normalize: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rates: vec![2, 3, 4],
            trials: 10,
            master_seed: 0,
            ranks: vec![1, 5, 10, 20],
            l2_normalize: false,
        }
    }
}

/// How a query rate was mapped onto a trained level.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RateAssignment {
    pub rate: u32,
    pub level: usize,
    pub assigned_ratio: String,
    pub seen: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ranks: Vec<usize>,
    pub trials: Vec<TrialResult>,
    pub cmc_mean: Vec<f64>,
    pub cmc_std: Vec<f64>,
    pub map_mean: f64,
    pub map_std: f64,
    pub assignments: Vec<RateAssignment>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl EvalReport {
    pub fn from_trials(trials: Vec<TrialResult>, ranks: Vec<usize>, assignments: Vec<RateAssignment>) -> Result<Self> {
        if trials.is_empty() {
            return Err(Error::domain("no trials to aggregate"));
        }
        let width = trials.iter().map(|t| t.cmc.len()).max().unwrap_or(0);
        let mut cmc_mean = Vec::with_capacity(width);
        let mut cmc_std = Vec::with_capacity(width);
        for k in 1..=width {
            let vals: Vec<f64> = trials.iter().map(|t| t.rank(k)).collect();
            let (m, s) = mean_std(&vals);
            cmc_mean.push(m);
            cmc_std.push(s);
        }
        let maps: Vec<f64> = trials.iter().map(|t| t.map).collect();
        let (map_mean, map_std) = mean_std(&maps);
        Ok(Self {
            ranks,
            trials,
            cmc_mean,
            cmc_std,
            map_mean,
            map_std,
            assignments,
        })
    }

    pub fn rank(&self, k: usize) -> f64 {
        if self.cmc_mean.is_empty() {
            return 0.0;
        }
        self.cmc_mean[(k.max(1) - 1).min(self.cmc_mean.len() - 1)]
    }

    pub fn rank_std(&self, k: usize) -> f64 {
        if self.cmc_std.is_empty() {
            return 0.0;
        }
        self.cmc_std[(k.max(1) - 1).min(self.cmc_std.len() - 1)]
    }

    /// Tab-separated summary and per-trial table.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# resadapt evaluation report\n");
        out.push_str(&format!("trials\t{}\n", self.trials.len()));
        for a in &self.assignments {
            out.push_str(&format!(
                "assignment\trate={}\tlevel={}\tratio={}\t{}\n",
                a.rate,
                a.level,
                a.assigned_ratio,
                if a.seen { "seen" } else { "unseen" }
            ));
        }
        out.push_str("metric\tmean\tstd\n");
        for &k in &self.ranks {
            out.push_str(&format!("rank-{k}\t{:.6}\t{:.6}\n", self.rank(k), self.rank_std(k)));
        }
        out.push_str(&format!("mAP\t{:.6}\t{:.6}\n", self.map_mean, self.map_std));
        out.push_str("# per-trial\ntrial\tseed\tqueries\texcluded");
        for &k in &self.ranks {
            out.push_str(&format!("\trank-{k}"));
        }
        out.push_str("\tmAP\n");
        for (i, t) in self.trials.iter().enumerate() {
            out.push_str(&format!("{}\t{}\t{}\t{}", i + 1, t.seed, t.queries, t.excluded.len()));
            for &k in &self.ranks {
                out.push_str(&format!("\t{:.6}", t.rank(k)));
            }
            out.push_str(&format!("\t{:.6}\n", t.map));
        }
        out
    }
}

/// Seed of trial `t` derived from the master seed.
pub fn trial_seed(master_seed: u64, trial: usize) -> u64 {
    master_seed ^ (trial as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Content hash of a model, used to key cached embeddings.
pub fn model_hash<T: Scalar>(state: &ModelState<T>) -> Result<u64> {
    let bytes = serde_json::to_vec(state)?;
    let digest = Sha256::digest(&bytes);
    Ok(u64::from_le_bytes(digest[..8].try_into().expect("8 bytes")))
}

/// Embeddings keyed by `(model hash, image id, rate)`.
#[derive(Debug, Default)]
pub struct EmbeddingCache<T> {
    entries: HashMap<(u64, String, u32), VaryingLengthEmbedding<T>>,
}

impl<T: Scalar> EmbeddingCache<T> {
    pub fn new() -> Self {
        Self {
            entries: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get_or_insert(
        &mut self,
        key: (u64, String, u32),
        compute: impl FnOnce() -> Result<VaryingLengthEmbedding<T>>,
    ) -> Result<&VaryingLengthEmbedding<T>> {
        use std::collections::hash_map::Entry;
        match self.entries.entry(key) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(v) => Ok(v.insert(compute()?)),
        }
    }
}

/// Level a query captured at down-sampling `rate` is processed at.
pub fn assign_rate(rate: u32, known_ratios: &[Rational]) -> Result<RateAssignment> {
    let ratio = if rate <= 1 { Rational::one() } else { Rational::new(1, rate) };
    let level = resolve_unseen_resolution(ratio, known_ratios)?;
    Ok(RateAssignment {
        rate,
        level: level.index(),
        assigned_ratio: level.ratio().to_string(),
        seen: known_ratios.contains(&ratio),
    })
}

/// Embed a canonical-size HR image after degrading it by `rate`.
pub fn embed_at_rate<T: Scalar>(
    state: &ModelState<T>,
    hr: &Image<f32>,
    rate: u32,
) -> Result<VaryingLengthEmbedding<T>> {
    let canonical = (state.net.config.input_height, state.net.config.input_width);
    let assignment = assign_rate(rate, &state.known_ratios)?;
    let level = ResolutionLevel::new(assignment.level, &state.known_ratios)?;
    let image = normalize(&degrade(hr, rate, canonical)?).cast::<T>();
    state.embed(&image, level)
}

/// Run `options.trials` MLR trials over `test_records` and aggregate CMC
/// and mAP. Gallery images are embedded at full resolution; each query is
/// degraded by its drawn rate and embedded at the level that rate maps to.
pub fn evaluate_mlr<T: Scalar>(
    state: &ModelState<T>,
    test_records: &[IdentityImageRecord],
    options: &EvalOptions,
    cache: &mut EmbeddingCache<T>,
) -> Result<EvalReport> {
    if options.trials == 0 {
        return Err(Error::domain("at least one trial is required"));
    }
    let canonical = (state.net.config.input_height, state.net.config.input_width);
    let hash = model_hash(state)?;
    let mut assignments: BTreeMap<u32, RateAssignment> = BTreeMap::new();
    for &rate in &options.rates {
        let a = assign_rate(rate, &state.known_ratios)?;
        if !a.seen {
            log::info!(
                "unseen rate {rate} assigned to level {} (ratio {})",
                a.level,
                a.assigned_ratio
            );
        }
        assignments.insert(rate, a);
    }
    let mut hr_images: HashMap<usize, Image<f32>> = HashMap::new();
    let mut trials = Vec::with_capacity(options.trials);
    for t in 0..options.trials {
        let seed = trial_seed(options.master_seed, t);
        let split = make_mlr_query_gallery(test_records, &options.rates, seed)?;
        for line in &split.log {
            log::debug!("trial {}: {line}", t + 1);
        }
        let mut load = |idx: usize| -> Result<Image<f32>> {
            if let Some(img) = hr_images.get(&idx) {
                return Ok(img.clone());
            }
            let img = test_records[idx].load()?.resize_bilinear(canonical.0, canonical.1)?;
            hr_images.insert(idx, img.clone());
            Ok(img)
        };
        let mut gallery = Vec::with_capacity(split.gallery.len());
        let mut gallery_identities = HashMap::new();
        for &g in &split.gallery {
            let rec = &test_records[g];
            let hr = load(g)?;
            let emb = cache
                .get_or_insert((hash, rec.image_id.clone(), 1), || embed_at_rate(state, &hr, 1))?
                .clone();
            gallery_identities.insert(rec.image_id.clone(), rec.identity_id);
            gallery.push((rec.image_id.clone(), emb));
        }
        let mut lists = Vec::with_capacity(split.queries.len());
        let mut query_ids = Vec::with_capacity(split.queries.len());
        for q in &split.queries {
            let rec = &test_records[q.record];
            let hr = load(q.record)?;
            let emb = cache
                .get_or_insert((hash, rec.image_id.clone(), q.rate), || {
                    embed_at_rate(state, &hr, q.rate)
                })?
                .clone();
            lists.push(rank(&rec.image_id, &emb, &gallery, options.l2_normalize)?);
            query_ids.push(rec.identity_id);
        }
        let mut result = cmc_map(&lists, &query_ids, &gallery_identities)?;
        result.seed = seed;
        trials.push(result);
    }
    EvalReport::from_trials(trials, options.ranks.clone(), assignments.into_values().collect())
}

const EXPORT_HEADER: &str = "# resadapt-embeddings v1";

/// Write one tab-separated line per embedding:
/// `image_id  level  ratio  v_1 .. v_k`. Values use the shortest
/// representation that parses back to the same float.
pub fn write_embeddings<T: Scalar, W: Write>(
    mut out: W,
    layout: &EmbeddingLayout,
    records: &[(String, VaryingLengthEmbedding<T>)],
) -> Result<()> {
    let dims: Vec<String> = layout.dims().iter().map(ToString::to_string).collect();
    writeln!(out, "{EXPORT_HEADER}\tdims={}", dims.join(","))?;
    for (id, emb) in records {
        if id.contains(['\t', '\n']) {
            return Err(Error::Data(format!("image id {id:?} contains a tab or newline")));
        }
        write!(out, "{id}\t{}\t{}", emb.level().index(), emb.level().ratio())?;
        for v in emb.concat() {
            write!(out, "\t{v}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parse the export format back into embeddings.
pub fn read_embeddings<T: Scalar, R: BufRead>(
    input: R,
    known_ratios: &[Rational],
) -> Result<(EmbeddingLayout, Vec<(String, VaryingLengthEmbedding<T>)>)> {
    let mut lines = input.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Data("empty embedding file".into()))??;
    let dims = header
        .strip_prefix(EXPORT_HEADER)
        .and_then(|rest| rest.trim().strip_prefix("dims="))
        .ok_or_else(|| Error::Data(format!("bad embedding header {header:?}")))?;
    let dims = dims
        .split(',')
        .map(|d| d.parse::<usize>().map_err(|e| Error::Data(format!("bad dims: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    let layout = EmbeddingLayout::new(dims)?;
    let mut out = Vec::new();
    for (n, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let bad = |what: &str| Error::Data(format!("line {}: {what}", n + 2));
        let mut cols = line.split('\t');
        let id = cols.next().ok_or_else(|| bad("missing id"))?.to_string();
        let level: usize = cols
            .next()
            .and_then(|c| c.parse().ok())
            .ok_or_else(|| bad("bad level"))?;
        let _ratio = cols.next().ok_or_else(|| bad("missing ratio"))?;
        let values = cols
            .map(|c| c.parse::<f64>().map(T::lit).map_err(|_| bad("bad value")))
            .collect::<Result<Vec<T>>>()?;
        let level = ResolutionLevel::new(level, known_ratios)?;
        if values.len() != layout.prefix_dim(level.index()) {
            return Err(bad("value count does not match level"));
        }
        let subvectors = (1..=level.index())
            .map(|j| values[layout.block_range(j)].to_vec())
            .collect();
        out.push((id, VaryingLengthEmbedding::new(level, subvectors, &layout)?));
    }
    Ok((layout, out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::resolution::ratios_from_rates;

    fn ratios() -> Vec<Rational> {
        ratios_from_rates(&[2]).unwrap()
    }

    fn emb(k: usize, subs: Vec<Vec<f64>>) -> VaryingLengthEmbedding<f64> {
        let layout = EmbeddingLayout::new(vec![2, 2]).unwrap();
        VaryingLengthEmbedding::new(ResolutionLevel::new(k, &ratios()).unwrap(), subs, &layout).unwrap()
    }

    #[test]
    fn prefix_query_has_zero_distance() {
        let g = emb(2, vec![vec![3.0, 4.0], vec![9.0, 9.0]]);
        let q = emb(1, vec![vec![3.0, 4.0]]);
        assert_eq!(cross_res_distance(&q, &g).unwrap(), 0.0);
    }

    #[test]
    fn hidden_gallery_block_is_ignored() {
        let q = emb(1, vec![vec![1.0, 2.0]]);
        let g = emb(2, vec![vec![3.0, 4.0], vec![9.0, 9.0]]);
        assert_eq!(cross_res_distance(&q, &g).unwrap(), 8.0);
    }

    #[test]
    fn full_level_is_plain_squared_l2() {
        let q = emb(2, vec![vec![1.0, -1.0], vec![0.5, 2.0]]);
        let g = emb(2, vec![vec![3.0, 4.0], vec![9.0, 9.0]]);
        let plain: f64 = q.concat().iter().zip(g.concat()).map(|(a, b)| (a - b).powi(2)).sum();
        assert_eq!(cross_res_distance(&q, &g).unwrap(), plain);
    }

    #[test]
    fn layout_mismatch_is_shape_error() {
        let q = emb(2, vec![vec![1.0, -1.0], vec![0.5, 2.0]]);
        let g = emb(1, vec![vec![3.0, 4.0]]);
        assert!(matches!(cross_res_distance(&q, &g), Err(Error::Shape(_))));
    }

    #[test]
    fn ranking_orders_by_hand_distances() {
        let q = emb(1, vec![vec![0.0, 0.0]]);
        let gallery = vec![
            ("a".to_string(), emb(2, vec![vec![2.0, 0.0], vec![0.0, 0.0]])), // 4
            ("b".to_string(), emb(2, vec![vec![1.0, 1.0], vec![5.0, 5.0]])), // 2
            ("c".to_string(), emb(2, vec![vec![0.0, 3.0], vec![0.0, 0.0]])), // 9
        ];
        let list = rank("q", &q, &gallery, false).unwrap();
        assert_eq!(list.gallery_ids, vec!["b", "a", "c"]);
        assert_eq!(list.distances, vec![2.0, 4.0, 9.0]);
        assert!(rank("q", &q, &[], false).is_err());
    }

    #[test]
    fn ties_keep_gallery_id_order() {
        let q = emb(1, vec![vec![0.0, 0.0]]);
        let same = emb(2, vec![vec![1.0, 0.0], vec![0.0, 0.0]]);
        let gallery = vec![("z".to_string(), same.clone()), ("m".to_string(), same)];
        let list = rank("q", &q, &gallery, false).unwrap();
        assert_eq!(list.gallery_ids, vec!["m", "z"]);
    }

    #[test]
    fn single_query_match_at_rank_three() {
        let list = RankedList::<f64> {
            query_id: "q".into(),
            gallery_ids: ["a", "b", "c", "d", "e"].iter().map(|s| s.to_string()).collect(),
            order: vec![0, 1, 2, 3, 4],
            distances: vec![0.0; 5],
        };
        let ids: HashMap<String, u32> =
            [("a", 1), ("b", 2), ("c", 7), ("d", 3), ("e", 4)].iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let r = cmc_map(&[list], &[7], &ids).unwrap();
        assert_eq!(r.cmc, vec![0.0, 0.0, 1.0, 1.0, 1.0]);
        assert!((r.map - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn perfect_ranking() {
        let ids: HashMap<String, u32> = [("a", 1), ("b", 2)].iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let mk = |first: &str, second: &str| RankedList::<f64> {
            query_id: "q".into(),
            gallery_ids: vec![first.into(), second.into()],
            order: vec![0, 1],
            distances: vec![0.0, 1.0],
        };
        let r = cmc_map(&[mk("a", "b"), mk("b", "a")], &[1, 2], &ids).unwrap();
        assert_eq!(r.cmc, vec![1.0, 1.0]);
        assert_eq!(r.map, 1.0);
    }

    #[test]
    fn unmatched_queries_are_excluded() {
        let ids: HashMap<String, u32> = [("a", 1)].iter().map(|&(k, v)| (k.to_string(), v)).collect();
        let list = RankedList::<f64> {
            query_id: "lost".into(),
            gallery_ids: vec!["a".into()],
            order: vec![0],
            distances: vec![0.0],
        };
        let r = cmc_map(&[list], &[9], &ids).unwrap();
        assert_eq!(r.excluded, vec!["lost".to_string()]);
        assert_eq!(r.queries, 0);
    }

    #[test]
    fn export_round_trip() {
        let layout = EmbeddingLayout::new(vec![2, 2]).unwrap();
        let recs = vec![
            ("x".to_string(), emb(1, vec![vec![0.1, -2.5e-7]])),
            ("y".to_string(), emb(2, vec![vec![1.0 / 3.0, 4.0], vec![9.0, f64::MIN_POSITIVE]])),
        ];
        let mut buf = Vec::new();
        write_embeddings(&mut buf, &layout, &recs).unwrap();
        let (l2, back) = read_embeddings::<f64, _>(&buf[..], &ratios()).unwrap();
        assert_eq!(l2, layout);
        assert_eq!(back, recs);
    }

    #[test]
    fn rate_assignment_flags_unseen() {
        let known = ratios_from_rates(&[2, 4, 8]).unwrap();
        let a = assign_rate(3, &known).unwrap();
        assert_eq!((a.level, a.seen, a.assigned_ratio.as_str()), (3, false, "1/2"));
        let b = assign_rate(6, &known).unwrap();
        assert_eq!((b.level, b.seen, b.assigned_ratio.as_str()), (2, false, "1/4"));
        assert!(assign_rate(8, &known).unwrap().seen);
    }
}

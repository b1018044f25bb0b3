//! Retrieval metrics under the cross-camera protocol.

use std::fmt::Write as _;

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::TfClip;
use crate::numerics::{Real, Tensor};

/// Row-major `n × m` feature matrix in double precision.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl FeatureMatrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::contract(format!(
                "{} values do not form a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(FeatureMatrix { rows, cols, data })
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    /// Rows `idx` in order.
    pub fn select(&self, idx: &[usize]) -> Self {
        let data = idx.iter().flat_map(|&i| self.row(i).iter().copied()).collect();
        FeatureMatrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }
}

/// Pairwise Euclidean distances, `n_q × n_g`.
pub fn distance_matrix(q: &FeatureMatrix, g: &FeatureMatrix) -> Result<FeatureMatrix> {
    if q.cols != g.cols {
        return Err(Error::shape("distance_matrix", &[q.rows, q.cols], &[g.rows, g.cols]));
    }
    let mut data = Vec::with_capacity(q.rows * g.rows);
    for i in 0..q.rows {
        let a = q.row(i);
        for j in 0..g.rows {
            let d2: f64 = a.iter().zip(g.row(j)).map(|(x, y)| (x - y) * (x - y)).sum();
            data.push(d2.sqrt());
        }
    }
    FeatureMatrix::new(q.rows, g.rows, data)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    /// `cmc[k-1]` is the rank-k accuracy, `k = 1..=K_max`.
    pub cmc: Vec<f64>,
    pub map: f64,
    /// `(query index, AP)` for every counted query.
    pub per_query_ap: Vec<(usize, f64)>,
    pub valid_queries: usize,
}

impl EvalResult {
    /// Rank-k accuracy; ranks past the stored curve saturate.
    pub fn rank(&self, k: usize) -> f64 {
        self.cmc[k.clamp(1, self.cmc.len()) - 1]
    }

    pub fn report(&self) -> String {
        format!(
            "rank1 = {:.6}\nrank5 = {:.6}\nrank10 = {:.6}\nmAP = {:.6}\n",
            self.rank(1),
            self.rank(5),
            self.rank(10),
            self.map
        )
    }

    pub fn per_query_csv(&self, query_tracklets: &[u32]) -> String {
        let mut s = String::from("query,tracklet_id,ap\n");
        for &(q, ap) in &self.per_query_ap {
            let _ = writeln!(s, "{q},{},{ap:.9}", query_tracklets.get(q).copied().unwrap_or(0));
        }
        s
    }
}

pub const CMC_MAX_RANK: usize = 50;

/// Ranks each query's gallery by ascending distance, ties broken by gallery
/// index, after dropping entries with the query's identity and camera.
pub fn cmc_map(
    distmat: &FeatureMatrix,
    q_ids: &[u32],
    g_ids: &[u32],
    q_cams: &[u32],
    g_cams: &[u32],
) -> Result<EvalResult> {
    let (nq, ng) = (distmat.rows, distmat.cols);
    if q_ids.len() != nq || q_cams.len() != nq || g_ids.len() != ng || g_cams.len() != ng {
        return Err(Error::contract("label and camera lists must match the distance matrix"));
    }
    if ng == 0 {
        return Err(Error::Eval("empty gallery".into()));
    }
    let k_max = CMC_MAX_RANK.min(ng);
    let mut hits = vec![0usize; k_max];
    let mut per_query_ap = Vec::new();
    for q in 0..nq {
        let d = distmat.row(q);
        let mut order: Vec<usize> = (0..ng)
            .filter(|&g| !(g_ids[g] == q_ids[q] && g_cams[g] == q_cams[q]))
            .collect();
        order.sort_by(|&a, &b| d[a].total_cmp(&d[b]).then(a.cmp(&b)));
        let mut found = 0usize;
        let mut precision_sum = 0.0;
        let mut first = None;
        for (pos, &g) in order.iter().enumerate() {
            if g_ids[g] == q_ids[q] {
                found += 1;
                precision_sum += found as f64 / (pos + 1) as f64;
                first.get_or_insert(pos);
            }
        }
        let Some(first) = first else { continue };
        for h in hits.iter_mut().skip(first) {
            *h += 1;
        }
        per_query_ap.push((q, precision_sum / found as f64));
    }
    let valid = per_query_ap.len();
    if valid == 0 {
        return Err(Error::Eval("no query has a valid gallery match".into()));
    }
    Ok(EvalResult {
        cmc: hits.iter().map(|&h| h as f64 / valid as f64).collect(),
        map: per_query_ap.iter().map(|p| p.1).sum::<f64>() / valid as f64,
        per_query_ap,
        valid_queries: valid,
    })
}

/// Indices of the query (camera 1) and gallery (other cameras) tracklets.
pub fn cross_camera_split(cameras: &[u32]) -> (Vec<usize>, Vec<usize>) {
    (0..cameras.len()).partition(|&i| cameras[i] == 1)
}

/// `tracklet_id,identity,camera,f_0,…` with one row per tracklet.
pub fn embeddings_csv(tracklet_ids: &[u32], ids: &[u32], cams: &[u32], features: &FeatureMatrix) -> String {
    let mut s = String::from("tracklet_id,identity,camera");
    for j in 0..features.cols {
        let _ = write!(s, ",f_{j}");
    }
    s.push('\n');
    for i in 0..features.rows {
        let _ = write!(s, "{},{},{}", tracklet_ids[i], ids[i], cams[i]);
        for x in features.row(i) {
            let _ = write!(s, ",{x:e}");
        }
        s.push('\n');
    }
    s
}

/// Test features of every tracklet of a split.
#[derive(Clone, Debug, PartialEq)]
pub struct Extracted {
    pub tracklet_ids: Vec<u32>,
    pub ids: Vec<u32>,
    pub cams: Vec<u32>,
    /// `[v ‖ v̂]`, width `d + D`.
    pub features: FeatureMatrix,
}

fn to_matrix<T: Real>(t: &Tensor<T>) -> FeatureMatrix {
    FeatureMatrix {
        rows: t.shape()[0],
        cols: t.shape()[1],
        data: t.data().iter().map(|x| x.f64()).collect(),
    }
}

/// Concatenated sequence features with deterministic frame sampling.
pub fn extract_features<T: Real>(model: &TfClip<T>, ds: &Dataset, seq_len: usize) -> Result<Extracted> {
    let (v, v_hat) = model.embed_dataset(ds, seq_len)?;
    let (v, v_hat) = (to_matrix(&v), to_matrix(&v_hat));
    let mut data = Vec::with_capacity(v.rows * (v.cols + v_hat.cols));
    for i in 0..v.rows {
        data.extend_from_slice(v.row(i));
        data.extend_from_slice(v_hat.row(i));
    }
    let records = &ds.manifest.records;
    Ok(Extracted {
        tracklet_ids: records.iter().map(|r| r.tracklet_id).collect(),
        ids: records.iter().map(|r| r.identity).collect(),
        cams: records.iter().map(|r| r.camera).collect(),
        features: FeatureMatrix::new(v.rows, v.cols + v_hat.cols, data)?,
    })
}

/// Camera 1 queries against the other cameras.
pub fn evaluate_extracted(x: &Extracted) -> Result<EvalResult> {
    let (q, g) = cross_camera_split(&x.cams);
    if q.is_empty() || g.is_empty() {
        return Err(Error::Eval(
            "split needs camera 1 queries and a gallery from other cameras".into(),
        ));
    }
    let pick = |v: &[u32], idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<u32>>();
    let dist = distance_matrix(&x.features.select(&q), &x.features.select(&g))?;
    cmc_map(
        &dist,
        &pick(&x.ids, &q),
        &pick(&x.ids, &g),
        &pick(&x.cams, &q),
        &pick(&x.cams, &g),
    )
}

pub fn evaluate<T: Real>(model: &TfClip<T>, ds: &Dataset, seq_len: usize) -> Result<EvalResult> {
    evaluate_extracted(&extract_features(model, ds, seq_len)?)
}

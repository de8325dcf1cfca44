//! Orthogonal Procrustes alignment between the two entity spaces.

use nalgebra::{DMatrix, RowDVector};

use crate::data::{DatasetBundle, QueryInstance};
use crate::error::{Error, Result};
use crate::eval::Scorer;
use crate::graph::{Direction, EntityId, Side};
use crate::model::ParamStore;

/// `W = U·Vᵀ` from the SVD of `XᵀY`, the orthogonal minimizer of
/// `‖XW - Y‖_F`.
pub fn orthogonal_procrustes(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.shape() != y.shape() {
        return Err(Error::Shape(format!("procrustes inputs {:?} vs {:?}", x.shape(), y.shape())));
    }
    let svd = (x.transpose() * y).svd(true, true);
    let max = svd.singular_values.max();
    let min = svd.singular_values.min();
    if !(min > 1e-10 * max.max(f64::MIN_POSITIVE)) {
        log::warn!("anchor cross-covariance is rank deficient; the orthogonal map is not unique");
    }
    let u = svd.u.expect("u requested");
    let v_t = svd.v_t.expect("v_t requested");
    Ok(u * v_t)
}

/// Centered projection onto the top principal components.
#[derive(Debug, Clone, PartialEq)]
pub struct Pca {
    pub mean: RowDVector<f64>,
    /// `d × k`, columns are components by descending variance.
    pub components: DMatrix<f64>,
}

impl Pca {
    pub fn fit(data: &DMatrix<f64>, k: usize) -> Result<Pca> {
        let (n, d) = data.shape();
        if k == 0 || k > d || n == 0 {
            return Err(Error::InvalidArgument(format!("cannot keep {k} components of {n}x{d} data")));
        }
        let mean = data.row_mean();
        let mut centered = data.clone();
        for mut row in centered.row_iter_mut() {
            row -= &mean;
        }
        let cov = centered.transpose() * &centered / n as f64;
        let eig = cov.symmetric_eigen();
        let mut order: Vec<usize> = (0..d).collect();
        order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
        let mut components = DMatrix::zeros(d, k);
        for (c, &i) in order.iter().take(k).enumerate() {
            let mut col = eig.eigenvectors.column(i).clone_owned();
            // fix the sign so the largest-magnitude entry is positive
            let lead = col.iter().copied().fold(0.0f64, |acc, v| if v.abs() > acc.abs() { v } else { acc });
            if lead < 0.0 {
                col = -col;
            }
            components.set_column(c, &col);
        }
        Ok(Pca { mean, components })
    }

    pub fn apply(&self, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let mut centered = rows.clone();
        for mut row in centered.row_iter_mut() {
            row -= &self.mean;
        }
        centered * &self.components
    }
}

/// Entity-level baseline: maps TCM entity embeddings onto WM ones with an
/// orthogonal matrix and ranks by cosine. Descriptions play no role.
#[derive(Debug, Clone, PartialEq)]
pub struct ProcrustesModel {
    /// `d' × d'`, applied from the right to TCM rows.
    pub map: DMatrix<f64>,
    /// Present only when the two sides have different dimensions.
    pub pca: Option<[Pca; 2]>,
}

impl ProcrustesModel {
    /// Fits on the given `(tcm, wm)` anchor pairs.
    pub fn fit(bundle: &DatasetBundle, pairs: &[(EntityId, EntityId)]) -> Result<ProcrustesModel> {
        if pairs.is_empty() {
            return Err(Error::InsufficientData("procrustes needs at least one anchor".into()));
        }
        let (_, d_t, d_w) = bundle.dims();
        let pca = if d_t == d_w {
            None
        } else {
            let k = d_t.min(d_w);
            Some([Pca::fit(bundle.features(Side::Tcm), k)?, Pca::fit(bundle.features(Side::Wm), k)?])
        };
        let mut model = ProcrustesModel { map: DMatrix::identity(1, 1), pca };
        let x = model.project(Side::Tcm, &bundle.embeddings(Side::Tcm).matrix(pairs.iter().map(|p| p.0 .0 as u64))?);
        let y = model.project(Side::Wm, &bundle.embeddings(Side::Wm).matrix(pairs.iter().map(|p| p.1 .0 as u64))?);
        if pairs.len() < x.ncols() {
            log::warn!("{} anchors for a {}-dimensional procrustes map", pairs.len(), x.ncols());
        }
        model.map = orthogonal_procrustes(&x, &y)?;
        Ok(model)
    }

    fn project(&self, side: Side, rows: &DMatrix<f64>) -> DMatrix<f64> {
        match &self.pca {
            None => rows.clone(),
            Some(p) => p[(side == Side::Wm) as usize].apply(rows),
        }
    }

    /// Source rows carried into the target space.
    pub fn map_rows(&self, dir: Direction, rows: &DMatrix<f64>) -> DMatrix<f64> {
        let projected = self.project(dir.source_side(), rows);
        match dir {
            Direction::TcmToWm => projected * &self.map,
            Direction::WmToTcm => projected * self.map.transpose(),
        }
    }

    pub fn to_params(&self) -> ParamStore {
        let mut s = ParamStore::new();
        s.push("map", self.map.clone());
        if let Some([t, w]) = &self.pca {
            s.push("tcm_mean", DMatrix::from_row_slice(1, t.mean.len(), t.mean.as_slice()));
            s.push("tcm_components", t.components.clone());
            s.push("wm_mean", DMatrix::from_row_slice(1, w.mean.len(), w.mean.as_slice()));
            s.push("wm_components", w.components.clone());
        }
        s
    }

    pub fn from_params(p: &ParamStore) -> Result<ProcrustesModel> {
        let get = |n: &str| p.by_name(n).cloned().ok_or_else(|| Error::Checkpoint(format!("missing tensor {n}")));
        let map = get("map")?;
        let pca = if p.index_of("tcm_mean").is_some() {
            let row = |m: DMatrix<f64>| RowDVector::from_row_slice(m.as_slice());
            Some([
                Pca { mean: row(get("tcm_mean")?), components: get("tcm_components")? },
                Pca { mean: row(get("wm_mean")?), components: get("wm_components")? },
            ])
        } else {
            None
        };
        Ok(ProcrustesModel { map, pca })
    }
}

fn unit_rows(mut m: DMatrix<f64>) -> DMatrix<f64> {
    for mut row in m.row_iter_mut() {
        let n = row.norm();
        if n > 0.0 {
            row /= n;
        }
    }
    m
}

impl Scorer for ProcrustesModel {
    fn score_matrix(&self, bundle: &DatasetBundle, dir: Direction, queries: &[&QueryInstance]) -> Result<DMatrix<f64>> {
        let src = unit_rows(self.map_rows(dir, &bundle.source_entity_matrix(queries, dir)?));
        let tgt = unit_rows(self.project(dir.target_side(), bundle.features(dir.target_side())));
        Ok(src * tgt.transpose())
    }
}

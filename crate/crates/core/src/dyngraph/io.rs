//! Dataset directory format.
//!
//! ```text
//! manifest.json        name, num_nodes, feature_dim, num_snapshots, link_types,
//!                      num_links, split {train,val,test}, files {edges, features}
//! edges.csv            t,src,dst,type   (one row per undirected link, type may be empty)
//! features_t{t}.csv    N rows of d comma-separated reals
//! features_next.csv    features of the prediction step T+1
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use super::{DynamicGraph, Edge, GraphSnapshot, SplitSpec};
use crate::error::{DgibError, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const NEXT_FEATURES_FILE: &str = "features_next.csv";
const FEATURE_PATTERN: &str = "features_t{t}.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestSplit {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestFiles {
    pub edges: String,
    /// File name pattern; `{t}` is replaced by the 1-based time index.
    pub features: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_nodes: usize,
    pub feature_dim: usize,
    pub num_snapshots: usize,
    pub link_types: u32,
    /// Total undirected links over all snapshots. Optional in hand-written manifests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_links: Option<usize>,
    pub split: ManifestSplit,
    pub files: ManifestFiles,
}

fn validation(file: impl AsRef<Path>, message: impl Into<String>) -> DgibError {
    DgibError::Validation {
        file: file.as_ref().display().to_string(),
        message: message.into(),
    }
}

fn read_features(path: &Path, n: usize, d: usize) -> Result<Array2<f64>> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DgibError::io(path, io),
            other => validation(path, format!("{other:?}")),
        })?;
    let mut data = Vec::with_capacity(n * d);
    let mut rows = 0usize;
    for record in reader.records() {
        let record = record.map_err(|e| validation(path, e.to_string()))?;
        if d == 0 && record.len() == 1 && record[0].trim().is_empty() {
            rows += 1;
            continue;
        }
        if record.len() != d {
            return Err(validation(
                path,
                format!("row {} has {} columns, expected feature_dim {d}", rows + 1, record.len()),
            ));
        }
        for field in record.iter() {
            let x: f64 = field
                .trim()
                .parse()
                .map_err(|_| validation(path, format!("row {}: bad real `{field}`", rows + 1)))?;
            data.push(x);
        }
        rows += 1;
    }
    if rows != n {
        return Err(validation(path, format!("{rows} rows, expected num_nodes {n}")));
    }
    Array2::from_shape_vec((n, d), data).map_err(|e| validation(path, e.to_string()))
}

fn write_features(path: &Path, x: &Array2<f64>) -> Result<()> {
    let mut out = String::with_capacity(x.len() * 12);
    for row in x.rows() {
        let mut first = true;
        for v in row {
            if !first {
                out.push(',');
            }
            first = false;
            // Display for f64 is shortest round-trip and never uses exponents
            out.push_str(&format!("{v}"));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| DgibError::io(path, e))
}

pub fn load_dataset(manifest_path: impl AsRef<Path>) -> Result<DynamicGraph> {
    let manifest_path = manifest_path.as_ref();
    let text = fs::read_to_string(manifest_path).map_err(|e| DgibError::io(manifest_path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| validation(manifest_path, e.to_string()))?;
    let dir = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let t_max = m.num_snapshots;
    let split = SplitSpec {
        train_len: m.split.train,
        val_len: m.split.val,
        test_len: m.split.test,
    };
    if t_max == 0 {
        return Err(validation(manifest_path, "num_snapshots must be >= 1"));
    }
    if split.train_len == 0 || split.total() != t_max {
        return Err(validation(
            manifest_path,
            format!("split {:?} does not sum to num_snapshots {t_max}", m.split),
        ));
    }

    let edges_path = dir.join(&m.files.edges);
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(&edges_path)
        .map_err(|e| match e.into_kind() {
            csv::ErrorKind::Io(io) => DgibError::io(&edges_path, io),
            other => validation(&edges_path, format!("{other:?}")),
        })?;
    let header = reader
        .headers()
        .map_err(|e| validation(&edges_path, e.to_string()))?
        .clone();
    if header.iter().map(str::trim).collect::<Vec<_>>() != ["t", "src", "dst", "type"] {
        return Err(validation(&edges_path, format!("unexpected header {header:?}")));
    }
    let mut per_time: Vec<Vec<Edge>> = vec![Vec::new(); t_max];
    for (line, record) in reader.records().enumerate() {
        let record = record.map_err(|e| validation(&edges_path, e.to_string()))?;
        let bad = |what: &str| validation(&edges_path, format!("row {}: {what}", line + 1));
        if record.len() != 4 {
            return Err(bad("expected 4 columns"));
        }
        let t: usize = record[0].trim().parse().map_err(|_| bad("bad t"))?;
        let src: usize = record[1].trim().parse().map_err(|_| bad("bad src"))?;
        let dst: usize = record[2].trim().parse().map_err(|_| bad("bad dst"))?;
        let kind = match record[3].trim() {
            "" => None,
            s => {
                let k: u32 = s.parse().map_err(|_| bad("bad type"))?;
                if k >= m.link_types {
                    return Err(bad(&format!("type {k} >= link_types {}", m.link_types)));
                }
                Some(k)
            }
        };
        if t == 0 || t > t_max {
            return Err(bad(&format!("time {t} outside 1..={t_max}")));
        }
        if src >= m.num_nodes || dst >= m.num_nodes {
            return Err(bad(&format!("node id outside 0..{}", m.num_nodes)));
        }
        per_time[t - 1].push(Edge { src, dst, kind });
    }

    let mut snapshots = Vec::with_capacity(t_max);
    for (i, links) in per_time.into_iter().enumerate() {
        let t = i + 1;
        let fpath = dir.join(m.files.features.replace("{t}", &t.to_string()));
        let x = read_features(&fpath, m.num_nodes, m.feature_dim)?;
        let snap = GraphSnapshot::new(t, m.num_nodes, links, x)
            .map_err(|e| validation(&edges_path, e.to_string()))?;
        snapshots.push(snap);
    }
    let next = read_features(&dir.join(NEXT_FEATURES_FILE), m.num_nodes, m.feature_dim)?;

    let dg = DynamicGraph::new(m.name.clone(), snapshots, next, m.link_types, split)
        .map_err(|e| validation(manifest_path, e.to_string()))?;
    if let Some(declared) = m.num_links {
        if declared != dg.total_links() {
            return Err(validation(
                &edges_path,
                format!("{} links found, manifest declares {declared}", dg.total_links()),
            ));
        }
    }
    Ok(dg)
}

pub fn save_dataset(dg: &DynamicGraph, dir_path: impl AsRef<Path>) -> Result<PathBuf> {
    dg.validate()?;
    let dir = dir_path.as_ref();
    fs::create_dir_all(dir).map_err(|e| DgibError::io(dir, e))?;

    let manifest = Manifest {
        name: dg.name.clone(),
        num_nodes: dg.num_nodes,
        feature_dim: dg.feature_dim,
        num_snapshots: dg.len(),
        link_types: dg.link_types,
        num_links: Some(dg.total_links()),
        split: ManifestSplit {
            train: dg.split.train_len,
            val: dg.split.val_len,
            test: dg.split.test_len,
        },
        files: ManifestFiles {
            edges: "edges.csv".to_string(),
            features: FEATURE_PATTERN.to_string(),
        },
    };

    let edges_path = dir.join(&manifest.files.edges);
    let mut edges = String::from("t,src,dst,type\n");
    for s in &dg.snapshots {
        for e in s.links() {
            match e.kind {
                Some(k) => edges.push_str(&format!("{},{},{},{k}\n", s.t, e.src, e.dst)),
                None => edges.push_str(&format!("{},{},{},\n", s.t, e.src, e.dst)),
            }
        }
    }
    let mut f = fs::File::create(&edges_path).map_err(|e| DgibError::io(&edges_path, e))?;
    f.write_all(edges.as_bytes())
        .map_err(|e| DgibError::io(&edges_path, e))?;

    for s in &dg.snapshots {
        let p = dir.join(FEATURE_PATTERN.replace("{t}", &s.t.to_string()));
        write_features(&p, &s.features)?;
    }
    write_features(&dir.join(NEXT_FEATURES_FILE), &dg.next_features)?;

    let manifest_path = dir.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    fs::write(&manifest_path, text + "\n").map_err(|e| DgibError::io(&manifest_path, e))?;
    Ok(manifest_path)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn empty_graph(t: usize, n: usize, d: usize) -> DynamicGraph {
        let snaps = (1..=t)
            .map(|i| GraphSnapshot::empty(i, Array2::from_elem((n, d), 0.25)))
            .collect();
        DynamicGraph::new(
            "empty",
            snaps,
            Array2::zeros((n, d)),
            0,
            SplitSpec::new(t - 2, 1, 1).unwrap(),
        )
        .unwrap()
    }

    #[test]
    fn empty_edges_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let dg = empty_graph(3, 4, 2);
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        assert!(mpath.exists());
        let edges = fs::read_to_string(dir.path().join("edges.csv")).unwrap();
        assert_eq!(edges, "t,src,dst,type\n");
        for t in 1..=3 {
            assert!(dir.path().join(format!("features_t{t}.csv")).exists());
        }
        let back = load_dataset(&mpath).unwrap();
        assert_eq!(back.len(), 3);
        assert_eq!(back.num_nodes, 4);
        assert!(back.snapshots.iter().all(|s| s.num_links() == 0 && s.features.dim() == (4, 2)));
    }

    #[test]
    fn missing_manifest_is_io_error() {
        let r = load_dataset("/nonexistent/dir/manifest.json");
        assert!(matches!(r, Err(DgibError::Io { .. })));
    }

    #[test]
    fn row_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let dg = empty_graph(3, 4, 2);
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        fs::write(dir.path().join("features_t2.csv"), "0,0\n0,0\n").unwrap();
        match load_dataset(&mpath) {
            Err(DgibError::Validation { file, .. }) => assert!(file.ends_with("features_t2.csv")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn column_mismatch_names_file() {
        let dir = tempfile::tempdir().unwrap();
        let dg = empty_graph(3, 4, 2);
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        fs::write(dir.path().join("features_next.csv"), "0\n0\n0\n0\n").unwrap();
        match load_dataset(&mpath) {
            Err(DgibError::Validation { file, .. }) => assert!(file.ends_with("features_next.csv")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn declared_link_count_is_checked() {
        let dir = tempfile::tempdir().unwrap();
        let dg = empty_graph(3, 4, 2);
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.num_links = Some(7);
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        match load_dataset(&mpath) {
            Err(DgibError::Validation { file, .. }) => assert!(file.ends_with("edges.csv")),
            other => panic!("expected validation error, got {other:?}"),
        }
    }

    #[test]
    fn snapshot_count_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let dg = empty_graph(3, 4, 2);
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&mpath).unwrap()).unwrap();
        m.num_snapshots = 4;
        fs::write(&mpath, serde_json::to_string(&m).unwrap()).unwrap();
        assert!(matches!(load_dataset(&mpath), Err(DgibError::Validation { .. })));
    }

    #[test]
    fn untyped_edges_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut dg = empty_graph(3, 4, 2);
        dg.snapshots[0]
            .replace_links(vec![Edge { src: 2, dst: 0, kind: None }])
            .unwrap();
        let mpath = save_dataset(&dg, dir.path()).unwrap();
        let edges = fs::read_to_string(dir.path().join("edges.csv")).unwrap();
        assert_eq!(edges, "t,src,dst,type\n1,0,2,\n");
        assert_eq!(load_dataset(&mpath).unwrap(), dg);
    }
}

//! Mesh topology, landmarks, region weights, the graph Laplacian, and
//! mesh I/O.
//!
//! A topology is immutable once constructed and shared freely across
//! threads. Geometry travels as flat `[x0, y0, z0, x1, ...]` coordinate
//! rows; the companion animation type carries one such row per frame.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{Tensor, VecMap};

/// Landmark counts fixed by the tracking convention: 68 face landmarks,
/// 20 of which ring the mouth.
pub const NUM_LANDMARKS: usize = 68;
pub const NUM_MOUTH_LANDMARKS: usize = 20;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed OBJ record: {detail}")]
    ObjParse {
        path: String,
        line: usize,
        detail: String,
    },
    #[error("{path}: {detail}")]
    SidecarParse { path: String, detail: String },
    #[error("index {index} out of range for {count} vertices")]
    IndexOutOfRange { index: usize, count: usize },
    #[error("mouth landmark list is not a subset of the landmark list (vertex {index})")]
    MouthNotInLandmarks { index: usize },
    #[error("inner-lip pair ({upper}, {lower}) is not drawn from the mouth landmarks")]
    PairNotInMouth { upper: usize, lower: usize },
    #[error("expected {expected} landmarks, found {found}")]
    LandmarkCount { expected: usize, found: usize },
    #[error("vertex {index} appears in no face; the Laplacian needs every vertex connected")]
    IsolatedVertex { index: usize },
    #[error("no inner-lip pairs; mouth gap is undefined for this topology")]
    EmptyPairList,
    #[error("vertex {index} has region label {label}, but only {regions} region values were given")]
    UnlabeledVertex {
        index: usize,
        label: usize,
        regions: usize,
    },
    #[error("region weight {value} at region {region} must be strictly positive")]
    NonPositiveWeight { region: usize, value: f64 },
    #[error("mouth region {mouth_region} has value {mouth_value}, but region {region} has {value}; the mouth must carry the largest weight")]
    MouthNotHeaviest {
        mouth_region: usize,
        mouth_value: f64,
        region: usize,
        value: f64,
    },
    #[error("animation has {cols} columns; topology with {nv} vertices needs {expected}")]
    FrameWidth {
        cols: usize,
        nv: usize,
        expected: usize,
    },
    #[error("fps {fps} is not one of 25, 30, or 62.5")]
    BadFps { fps: f64 },
    #[error("scale factor {factor} must be strictly positive")]
    NonPositiveScale { factor: f64 },
}

/// Static mesh structure: faces, landmark bookkeeping, and per-vertex
/// region weighting.
#[derive(Debug, Clone)]
pub struct MeshTopology {
    vertex_count: usize,
    faces: Vec<[usize; 3]>,
    landmark_indices: Vec<usize>,
    mouth_landmark_indices: Vec<usize>,
    inner_lip_pairs: Vec<(usize, usize)>,
    region_labels: Vec<usize>,
    region_values: Vec<f64>,
    mouth_region: usize,
    region_weights: Vec<f64>,
}

impl MeshTopology {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        vertex_count: usize,
        faces: Vec<[usize; 3]>,
        landmark_indices: Vec<usize>,
        mouth_landmark_indices: Vec<usize>,
        inner_lip_pairs: Vec<(usize, usize)>,
        region_labels: Vec<usize>,
        region_values: Vec<f64>,
        mouth_region: usize,
    ) -> Result<Self, MeshError> {
        let check = |index: usize| -> Result<(), MeshError> {
            if index >= vertex_count {
                return Err(MeshError::IndexOutOfRange {
                    index,
                    count: vertex_count,
                });
            }
            Ok(())
        };
        for f in &faces {
            for &v in f {
                check(v)?;
            }
        }
        for &v in &landmark_indices {
            check(v)?;
        }
        for &v in &mouth_landmark_indices {
            check(v)?;
            if !landmark_indices.contains(&v) {
                return Err(MeshError::MouthNotInLandmarks { index: v });
            }
        }
        for &(u, l) in &inner_lip_pairs {
            check(u)?;
            check(l)?;
            if !mouth_landmark_indices.contains(&u) || !mouth_landmark_indices.contains(&l) {
                return Err(MeshError::PairNotInMouth { upper: u, lower: l });
            }
        }
        let region_weights =
            region_weight_mask(&region_labels, &region_values, mouth_region)?;
        if region_labels.len() != vertex_count {
            return Err(MeshError::UnlabeledVertex {
                index: region_labels.len().min(vertex_count),
                label: 0,
                regions: region_values.len(),
            });
        }
        Ok(Self {
            vertex_count,
            faces,
            landmark_indices,
            mouth_landmark_indices,
            inner_lip_pairs,
            region_labels,
            region_values,
            mouth_region,
            region_weights,
        })
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_count
    }

    pub fn coord_count(&self) -> usize {
        3 * self.vertex_count
    }

    pub fn faces(&self) -> &[[usize; 3]] {
        &self.faces
    }

    pub fn landmark_indices(&self) -> &[usize] {
        &self.landmark_indices
    }

    pub fn mouth_landmark_indices(&self) -> &[usize] {
        &self.mouth_landmark_indices
    }

    pub fn inner_lip_pairs(&self) -> &[(usize, usize)] {
        &self.inner_lip_pairs
    }

    pub fn region_labels(&self) -> &[usize] {
        &self.region_labels
    }

    pub fn region_values(&self) -> &[f64] {
        &self.region_values
    }

    pub fn mouth_region(&self) -> usize {
        self.mouth_region
    }

    /// Per-vertex positive weights, `region_values[label]` for each vertex.
    pub fn region_weights(&self) -> &[f64] {
        &self.region_weights
    }

    /// Enforce the full landmark contract (68/20); construction leaves the
    /// counts free so small test meshes stay cheap to build.
    pub fn require_landmark_counts(&self) -> Result<(), MeshError> {
        if self.landmark_indices.len() != NUM_LANDMARKS {
            return Err(MeshError::LandmarkCount {
                expected: NUM_LANDMARKS,
                found: self.landmark_indices.len(),
            });
        }
        if self.mouth_landmark_indices.len() != NUM_MOUTH_LANDMARKS {
            return Err(MeshError::LandmarkCount {
                expected: NUM_MOUTH_LANDMARKS,
                found: self.mouth_landmark_indices.len(),
            });
        }
        Ok(())
    }
}

/// Per-vertex weights from region labels: vertex weight is
/// `values[label]`. The mouth region must carry the largest value, and
/// every value must be strictly positive.
pub fn region_weight_mask(
    labels: &[usize],
    values: &[f64],
    mouth_region: usize,
) -> Result<Vec<f64>, MeshError> {
    for (region, &value) in values.iter().enumerate() {
        if value <= 0.0 {
            return Err(MeshError::NonPositiveWeight { region, value });
        }
    }
    let mouth_value = *values
        .get(mouth_region)
        .ok_or(MeshError::UnlabeledVertex {
            index: 0,
            label: mouth_region,
            regions: values.len(),
        })?;
    for (region, &value) in values.iter().enumerate() {
        if value > mouth_value {
            return Err(MeshError::MouthNotHeaviest {
                mouth_region,
                mouth_value,
                region,
                value,
            });
        }
    }
    labels
        .iter()
        .enumerate()
        .map(|(index, &label)| {
            values.get(label).copied().ok_or(MeshError::UnlabeledVertex {
                index,
                label,
                regions: values.len(),
            })
        })
        .collect()
}

// ---- animation ------------------------------------------------------------

const ALLOWED_FPS: [f64; 3] = [25.0, 30.0, 62.5];

/// A vertex-position sequence: one row per frame, `3 * Nv` columns with
/// xyz interleaved per vertex.
#[derive(Debug, Clone)]
pub struct VertexAnim {
    frames: Tensor,
    fps: f64,
}

impl VertexAnim {
    pub fn new(frames: Tensor, fps: f64) -> Result<Self, MeshError> {
        if !ALLOWED_FPS.contains(&fps) {
            return Err(MeshError::BadFps { fps });
        }
        Ok(Self { frames, fps })
    }

    pub fn frames(&self) -> &Tensor {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn num_frames(&self) -> usize {
        self.frames.rows()
    }

    pub fn frame(&self, t: usize) -> &[f64] {
        self.frames.row(t)
    }

    /// Column count must be 3·Nv of the companion topology.
    pub fn check_topology(&self, topology: &MeshTopology) -> Result<(), MeshError> {
        if self.frames.cols() != topology.coord_count() {
            return Err(MeshError::FrameWidth {
                cols: self.frames.cols(),
                nv: topology.vertex_count(),
                expected: topology.coord_count(),
            });
        }
        Ok(())
    }
}

/// Multiply every coordinate by `factor` (e.g. 100 for unit conversion).
pub fn apply_scale(anim: &VertexAnim, factor: f64) -> Result<VertexAnim, MeshError> {
    if factor <= 0.0 {
        return Err(MeshError::NonPositiveScale { factor });
    }
    let scaled: Vec<f64> = anim.frames().data().iter().map(|v| v * factor).collect();
    Ok(VertexAnim {
        frames: Tensor::new(anim.frames().shape().to_vec(), scaled).unwrap(),
        fps: anim.fps,
    })
}

// ---- Laplacian ------------------------------------------------------------

/// Umbrella (uniform-weight) graph Laplacian over face-edge adjacency:
/// `(Lx)_i = x_i - mean_{j in N(i)} x_j`. Acts on flat coordinate vectors
/// of length 3·Nv, per component.
#[derive(Debug, Clone)]
pub struct GraphLaplacian {
    neighbors: Vec<Vec<usize>>,
}

pub fn build_laplacian(topology: &MeshTopology) -> Result<GraphLaplacian, MeshError> {
    let nv = topology.vertex_count();
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); nv];
    for f in topology.faces() {
        for (a, b) in [(f[0], f[1]), (f[1], f[2]), (f[2], f[0])] {
            if !neighbors[a].contains(&b) {
                neighbors[a].push(b);
            }
            if !neighbors[b].contains(&a) {
                neighbors[b].push(a);
            }
        }
    }
    for (i, n) in neighbors.iter_mut().enumerate() {
        if n.is_empty() {
            return Err(MeshError::IsolatedVertex { index: i });
        }
        n.sort_unstable();
    }
    Ok(GraphLaplacian { neighbors })
}

impl GraphLaplacian {
    pub fn vertex_count(&self) -> usize {
        self.neighbors.len()
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }
}

impl VecMap for GraphLaplacian {
    fn dim(&self) -> usize {
        3 * self.neighbors.len()
    }

    fn apply(&self, x: &[f64], y: &mut [f64]) {
        let nv = self.neighbors.len();
        assert_eq!(x.len(), 3 * nv, "Laplacian expects 3*Nv = {} values", 3 * nv);
        for i in 0..nv {
            let n = &self.neighbors[i];
            let inv = 1.0 / n.len() as f64;
            for c in 0..3 {
                let mut mean = 0.0;
                for &j in n {
                    mean += x[3 * j + c];
                }
                y[3 * i + c] = x[3 * i + c] - mean * inv;
            }
        }
    }

    // (L^T x)_i = x_i - sum_{j in N(i)} x_j / |N(j)|; adjacency symmetry
    // turns the column sum into a neighbor loop.
    fn apply_transpose(&self, x: &[f64], y: &mut [f64]) {
        let nv = self.neighbors.len();
        assert_eq!(x.len(), 3 * nv, "Laplacian expects 3*Nv = {} values", 3 * nv);
        for i in 0..nv {
            for c in 0..3 {
                let mut acc = x[3 * i + c];
                for &j in &self.neighbors[i] {
                    acc -= x[3 * j + c] / self.neighbors[j].len() as f64;
                }
                y[3 * i + c] = acc;
            }
        }
    }
}

// ---- mouth gap ------------------------------------------------------------

/// Mean Euclidean distance over the inner-lip pairs of one frame.
pub fn mouth_gap(frame: &[f64], topology: &MeshTopology) -> Result<f64, MeshError> {
    let pairs = topology.inner_lip_pairs();
    if pairs.is_empty() {
        return Err(MeshError::EmptyPairList);
    }
    let mut acc = 0.0;
    for &(u, l) in pairs {
        let mut d2 = 0.0;
        for c in 0..3 {
            let diff = frame[3 * u + c] - frame[3 * l + c];
            d2 += diff * diff;
        }
        acc += d2.sqrt();
    }
    Ok(acc / pairs.len() as f64)
}

// ---- OBJ + sidecar I/O ----------------------------------------------------

/// Write one frame as Wavefront OBJ: `v` records at six decimal places,
/// then 1-based `f` records.
pub fn save_obj(path: &Path, frame: &[f64], topology: &MeshTopology) -> Result<(), MeshError> {
    assert_eq!(
        frame.len(),
        topology.coord_count(),
        "frame has {} coords, topology needs {}",
        frame.len(),
        topology.coord_count()
    );
    let mut out = String::new();
    for v in 0..topology.vertex_count() {
        out.push_str(&format!(
            "v {:.6} {:.6} {:.6}\n",
            frame[3 * v],
            frame[3 * v + 1],
            frame[3 * v + 2]
        ));
    }
    for f in topology.faces() {
        out.push_str(&format!("f {} {} {}\n", f[0] + 1, f[1] + 1, f[2] + 1));
    }
    fs::write(path, out).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Read `v`/`f` records; anything else is ignored. Indices come back
/// 0-based.
pub fn load_obj(path: &Path) -> Result<(Vec<f64>, Vec<[usize; 3]>), MeshError> {
    let text = fs::read_to_string(path).map_err(|source| MeshError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let p = path.display().to_string();
    let mut coords = Vec::new();
    let mut faces = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        let mut parts = line.split_whitespace();
        match parts.next() {
            Some("v") => {
                let mut got = 0;
                for part in parts.by_ref().take(3) {
                    let v: f64 = part.parse().map_err(|_| MeshError::ObjParse {
                        path: p.clone(),
                        line: line_no,
                        detail: format!("bad coordinate \"{part}\""),
                    })?;
                    coords.push(v);
                    got += 1;
                }
                if got != 3 {
                    return Err(MeshError::ObjParse {
                        path: p,
                        line: line_no,
                        detail: format!("vertex record has {got} coordinates, expected 3"),
                    });
                }
            }
            Some("f") => {
                let mut idx = [0usize; 3];
                let mut got = 0;
                for part in parts.by_ref().take(3) {
                    // Accept "3", "3/1", "3/1/2" forms; only the vertex
                    // index matters here.
                    let head = part.split('/').next().unwrap_or(part);
                    let one_based: usize = head.parse().map_err(|_| MeshError::ObjParse {
                        path: p.clone(),
                        line: line_no,
                        detail: format!("bad face index \"{part}\""),
                    })?;
                    if one_based == 0 {
                        return Err(MeshError::ObjParse {
                            path: p,
                            line: line_no,
                            detail: "face index 0 (OBJ is 1-based)".to_string(),
                        });
                    }
                    idx[got] = one_based - 1;
                    got += 1;
                }
                if got != 3 {
                    return Err(MeshError::ObjParse {
                        path: p,
                        line: line_no,
                        detail: format!("face record has {got} indices, expected 3"),
                    });
                }
                faces.push(idx);
            }
            _ => {}
        }
    }
    let nv = coords.len() / 3;
    for f in &faces {
        for &v in f {
            if v >= nv {
                return Err(MeshError::IndexOutOfRange { index: v, count: nv });
            }
        }
    }
    Ok((coords, faces))
}

/// The JSON sidecar that accompanies a topology OBJ: everything the OBJ
/// itself cannot carry.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TopologySidecar {
    pub landmark_indices: Vec<usize>,
    pub mouth_landmark_indices: Vec<usize>,
    pub inner_lip_pairs: Vec<(usize, usize)>,
    pub region_labels: Vec<usize>,
    pub region_values: Vec<f64>,
    pub mouth_region: usize,
}

/// Load an OBJ plus its sidecar into rest positions and a validated
/// topology. Landmark counts are enforced here: a bundle on disk must
/// honor the 68/20 convention.
pub fn load_topology(
    obj_path: &Path,
    sidecar_path: &Path,
) -> Result<(Vec<f64>, MeshTopology), MeshError> {
    let (coords, faces) = load_obj(obj_path)?;
    let text = fs::read_to_string(sidecar_path).map_err(|source| MeshError::Io {
        path: sidecar_path.display().to_string(),
        source,
    })?;
    let sidecar: TopologySidecar =
        serde_json::from_str(&text).map_err(|e| MeshError::SidecarParse {
            path: sidecar_path.display().to_string(),
            detail: e.to_string(),
        })?;
    let topology = MeshTopology::new(
        coords.len() / 3,
        faces,
        sidecar.landmark_indices,
        sidecar.mouth_landmark_indices,
        sidecar.inner_lip_pairs,
        sidecar.region_labels,
        sidecar.region_values,
        sidecar.mouth_region,
    )?;
    topology.require_landmark_counts()?;
    Ok((coords, topology))
}

pub fn save_topology(
    obj_path: &Path,
    sidecar_path: &Path,
    rest: &[f64],
    topology: &MeshTopology,
) -> Result<(), MeshError> {
    save_obj(obj_path, rest, topology)?;
    let sidecar = TopologySidecar {
        landmark_indices: topology.landmark_indices().to_vec(),
        mouth_landmark_indices: topology.mouth_landmark_indices().to_vec(),
        inner_lip_pairs: topology.inner_lip_pairs().to_vec(),
        region_labels: topology.region_labels().to_vec(),
        region_values: topology.region_values().to_vec(),
        mouth_region: topology.mouth_region(),
    };
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar always serializes");
    fs::write(sidecar_path, text).map_err(|source| MeshError::Io {
        path: sidecar_path.display().to_string(),
        source,
    })
}

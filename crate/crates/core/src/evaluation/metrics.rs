use crate::error::{Error, Result};

/// Binary 3D grid stored x-fastest (`index = x + nx·(y + ny·z)`).
#[derive(Debug, Clone, PartialEq)]
pub struct Mask3 {
    shape: [usize; 3],
    voxels: Vec<bool>,
}

impl Mask3 {
    pub fn new(shape: [usize; 3], voxels: Vec<bool>) -> Result<Self> {
        let n = shape.iter().product::<usize>();
        if voxels.len() != n {
            return Err(Error::DimensionMismatch {
                index: 0,
                expected: n,
                found: voxels.len(),
            });
        }
        Ok(Self { shape, voxels })
    }

    pub fn empty(shape: [usize; 3]) -> Self {
        Self {
            shape,
            voxels: vec![false; shape.iter().product()],
        }
    }

    /// Voxels at the given `(x, y, z)` coordinates switched on.
    pub fn from_points(shape: [usize; 3], points: &[[usize; 3]]) -> Result<Self> {
        let mut m = Self::empty(shape);
        for p in points {
            if p.iter().zip(&shape).any(|(c, s)| c >= s) {
                return Err(Error::InvalidArgument(format!("voxel {p:?} outside grid {shape:?}")));
            }
            let i = m.index(*p);
            m.voxels[i] = true;
        }
        Ok(m)
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn voxels(&self) -> &[bool] {
        &self.voxels
    }

    pub fn count(&self) -> usize {
        self.voxels.iter().filter(|v| **v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|v| *v)
    }

    pub fn index(&self, [x, y, z]: [usize; 3]) -> usize {
        x + self.shape[0] * (y + self.shape[1] * z)
    }

    pub fn coords(&self, i: usize) -> [usize; 3] {
        let [nx, ny, _] = self.shape;
        [i % nx, (i / nx) % ny, i / (nx * ny)]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub prediction: Mask3,
    pub ground_truth: Mask3,
    pub spacing: [f64; 3],
}

impl MaskPair {
    pub fn new(prediction: Mask3, ground_truth: Mask3) -> Result<Self> {
        Self::with_spacing(prediction, ground_truth, [1.0; 3])
    }

    pub fn with_spacing(prediction: Mask3, ground_truth: Mask3, spacing: [f64; 3]) -> Result<Self> {
        if prediction.shape != ground_truth.shape {
            return Err(Error::InvalidArgument(format!(
                "mask shapes differ: {:?} vs {:?}",
                prediction.shape, ground_truth.shape
            )));
        }
        if spacing.iter().any(|s| !(*s > 0.0) || !s.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "voxel spacing must be positive, got {spacing:?}"
            )));
        }
        Ok(Self {
            prediction,
            ground_truth,
            spacing,
        })
    }
}

/// `2|P∩G| / (|P|+|G|)`; two empty masks score 1.
pub fn dice_score(pair: &MaskPair) -> f64 {
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pair.prediction.voxels.iter().zip(&pair.ground_truth.voxels) {
        p += a as usize;
        g += b as usize;
        inter += (a && b) as usize;
    }
    if p + g == 0 {
        return 1.0;
    }
    2.0 * inter as f64 / (p + g) as f64
}

/// 95th percentile of nearest-foreground distances from every voxel of each
/// mask to the other mask. `None` when either mask is empty.
pub fn hausdorff95(pair: &MaskPair) -> Option<f64> {
    let (p, g) = (&pair.prediction, &pair.ground_truth);
    if p.is_empty() || g.is_empty() {
        return None;
    }
    let to_g = squared_edt(g, pair.spacing);
    let to_p = squared_edt(p, pair.spacing);
    let mut d: Vec<f64> = Vec::with_capacity(p.count() + g.count());
    d.extend(p.voxels.iter().zip(&to_g).filter(|(v, _)| **v).map(|(_, s)| s.sqrt()));
    d.extend(g.voxels.iter().zip(&to_p).filter(|(v, _)| **v).map(|(_, s)| s.sqrt()));
    Some(percentile(&d, 95.0).expect("both masks are nonempty"))
}

/// Linear-interpolation percentile at rank `q/100·(n−1)` of the sorted values.
pub fn percentile(values: &[f64], q: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Empty("percentile of no values".into()));
    }
    if !(0.0..=100.0).contains(&q) {
        return Err(Error::InvalidArgument(format!(
            "percentile must be in [0, 100], got {q}"
        )));
    }
    if let Some(i) = values.iter().position(|v| v.is_nan()) {
        return Err(Error::NonFinite {
            what: "percentile input".into(),
            index: i,
        });
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = q / 100.0 * (v.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    Ok(v[lo] + (rank - lo as f64) * (v[hi] - v[lo]))
}

/// Exact squared Euclidean distance to the nearest foreground voxel, by
/// separable lower envelopes of parabolas along each axis.
fn squared_edt(mask: &Mask3, spacing: [f64; 3]) -> Vec<f64> {
    let shape = mask.shape;
    let mut f: Vec<f64> = mask
        .voxels
        .iter()
        .map(|&v| if v { 0.0 } else { f64::INFINITY })
        .collect();
    let strides = [1, shape[0], shape[0] * shape[1]];
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let n = shape[axis];
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        for i in 0..shape[a] {
            for j in 0..shape[b] {
                let base = i * strides[a] + j * strides[b];
                line.clear();
                line.extend((0..n).map(|k| f[base + k * strides[axis]]));
                envelope_1d(&line, spacing[axis], &mut out);
                for k in 0..n {
                    f[base + k * strides[axis]] = out[k];
                }
            }
        }
    }
    f
}

/// `out[q] = min_p (s·(q−p))² + f[p]` over the finite entries of `f`.
fn envelope_1d(f: &[f64], s: f64, out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let sites: Vec<usize> = (0..n).filter(|&p| f[p].is_finite()).collect();
    if sites.is_empty() {
        return;
    }
    let x = |p: usize| s * p as f64;
    let cross = |p: usize, q: usize| ((f[q] + x(q) * x(q)) - (f[p] + x(p) * x(p))) / (2.0 * (x(q) - x(p)));
    let mut v: Vec<usize> = Vec::with_capacity(sites.len());
    let mut z: Vec<f64> = Vec::with_capacity(sites.len() + 1);
    for &q in &sites {
        while let Some(&top) = v.last() {
            if cross(top, q) <= z[z.len() - 1] {
                v.pop();
                z.pop();
            } else {
                break;
            }
        }
        z.push(v.last().map_or(f64::NEG_INFINITY, |&top| cross(top, q)));
        v.push(q);
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < x(q) {
            k += 1;
        }
        let d = x(q) - x(v[k]);
        *o = d * d + f[v[k]];
    }
}

//! Dense feature extraction: a learnable 1×1 linear projector followed by
//! per-cell L2 normalization.

use std::fmt::Write as _;
use std::io::{BufRead, Read, Write};

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::GridShape;

/// A multi-channel image sampled on a grid. `values[i * channels + c]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageGrid {
    shape: GridShape,
    channels: usize,
    values: Vec<f64>,
}

impl ImageGrid {
    pub fn new(shape: GridShape, channels: usize, values: Vec<f64>) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("image needs at least one channel".into()));
        }
        if values.len() != shape.len() * channels {
            return Err(Error::shape(
                "image values",
                shape.len() * channels,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image values"));
        }
        Ok(Self {
            shape,
            channels,
            values,
        })
    }

    pub fn zeros(shape: GridShape, channels: usize) -> Self {
        Self {
            shape,
            channels,
            values: vec![0.0; shape.len() * channels],
        }
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    /// Channel vector of cell `i`.
    #[inline]
    pub fn pixel(&self, i: usize) -> &[f64] {
        &self.values[i * self.channels..(i + 1) * self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.values[i * self.channels..(i + 1) * self.channels]
    }

    /// Reads the plain-text format: a first line `h,w,channels`, followed by
    /// `h*w*channels` comma or newline separated values in row-major order.
    pub fn read_csv<R: BufRead>(reader: R) -> Result<Self> {
        let mut lines = reader.lines();
        let header = loop {
            match lines.next() {
                Some(line) => {
                    let line = line?;
                    if !line.trim().is_empty() {
                        break line;
                    }
                }
                None => return Err(Error::format("image csv", "missing header")),
            }
        };
        let dims: Vec<usize> = header
            .split(',')
            .map(|t| t.trim().parse::<usize>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::format("image csv", format!("bad header {header:?}: {e}")))?;
        let [h, w, channels] = dims[..] else {
            return Err(Error::format(
                "image csv",
                format!("header must be h,w,channels, got {header:?}"),
            ));
        };
        let shape = GridShape::new(h, w)?;
        let mut values = Vec::with_capacity(shape.len() * channels);
        for line in lines {
            let line = line?;
            for tok in line.split(',').map(str::trim).filter(|t| !t.is_empty()) {
                let v = tok
                    .parse::<f64>()
                    .map_err(|e| Error::format("image csv", format!("bad value {tok:?}: {e}")))?;
                values.push(v);
            }
        }
        ImageGrid::new(shape, channels, values)
    }

    /// Writes the format read by [`ImageGrid::read_csv`], one cell per line.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        writeln!(
            out,
            "{},{},{}",
            self.shape.h(),
            self.shape.w(),
            self.channels
        )?;
        let mut line = String::new();
        for i in 0..self.shape.len() {
            line.clear();
            for (c, v) in self.pixel(i).iter().enumerate() {
                if c > 0 {
                    line.push(',');
                }
                write!(line, "{v}").unwrap();
            }
            writeln!(out, "{line}")?;
        }
        Ok(())
    }
}

/// Dense descriptor grid, one `dim`-vector per cell. `values[i * dim + k]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    shape: GridShape,
    dim: usize,
    values: Vec<f64>,
    normalized: bool,
}

impl FeatureMap {
    pub fn new(shape: GridShape, dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if values.len() != shape.len() * dim {
            return Err(Error::shape(
                "feature values",
                shape.len() * dim,
                values.len(),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature values"));
        }
        Ok(Self {
            shape,
            dim,
            values,
            normalized: false,
        })
    }

    pub fn shape(&self) -> GridShape {
        self.shape
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_normalized(&self) -> bool {
        self.normalized
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    /// Marks the map as normalized when every row already has unit norm
    /// (or is exactly zero).
    pub fn assume_normalized(mut self) -> Result<Self> {
        for i in 0..self.shape.len() {
            let n = norm(self.row(i));
            if n != 0.0 && (n - 1.0).abs() > 1e-6 {
                return Err(Error::NotNormalized);
            }
        }
        self.normalized = true;
        Ok(self)
    }

    /// Number of rows that are exactly zero (left untouched by normalization).
    pub fn zero_rows(&self) -> usize {
        (0..self.shape.len())
            .filter(|&i| self.row(i).iter().all(|&v| v == 0.0))
            .count()
    }
}

#[inline]
fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// 1×1 linear projection `weight^T x + bias` with gradient accumulators.
///
/// `weight` is `in_features × dim`, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearProjector {
    in_features: usize,
    dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub weight_grad: Vec<f64>,
    pub bias_grad: Vec<f64>,
}

impl LinearProjector {
    pub fn new(in_features: usize, dim: usize, weight: Vec<f64>, bias: Vec<f64>) -> Result<Self> {
        if in_features == 0 || dim == 0 {
            return Err(Error::Config(
                "projector dimensions must be positive".into(),
            ));
        }
        if weight.len() != in_features * dim {
            return Err(Error::shape(
                "projector weight",
                in_features * dim,
                weight.len(),
            ));
        }
        if bias.len() != dim {
            return Err(Error::shape("projector bias", dim, bias.len()));
        }
        if weight.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("projector parameters"));
        }
        Ok(Self {
            in_features,
            dim,
            weight_grad: vec![0.0; weight.len()],
            bias_grad: vec![0.0; bias.len()],
            weight,
            bias,
        })
    }

    /// Identity-shaped projector (`dim == in_features`), zero bias.
    pub fn identity(n: usize) -> Self {
        let mut weight = vec![0.0; n * n];
        for k in 0..n {
            weight[k * n + k] = 1.0;
        }
        Self::new(n, n, weight, vec![0.0; n]).expect("identity projector")
    }

    /// Weights drawn uniformly from `[-scale, scale]`, zero bias.
    pub fn random<R: Rng + ?Sized>(
        in_features: usize,
        dim: usize,
        scale: f64,
        rng: &mut R,
    ) -> Self {
        let weight = (0..in_features * dim)
            .map(|_| rng.random_range(-scale..=scale))
            .collect();
        Self::new(in_features, dim, weight, vec![0.0; dim]).expect("random projector")
    }

    pub fn in_features(&self) -> usize {
        self.in_features
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn zero_grad(&mut self) {
        self.weight_grad.fill(0.0);
        self.bias_grad.fill(0.0);
    }

    /// Binary checkpoint: `LPRJ`, `in_features` and `dim` as u32 LE, then the
    /// row-major weights followed by the bias as f64 LE.
    pub fn write_to<W: Write>(&self, mut out: W) -> Result<()> {
        out.write_all(PROJECTOR_MAGIC)?;
        out.write_all(&(self.in_features as u32).to_le_bytes())?;
        out.write_all(&(self.dim as u32).to_le_bytes())?;
        for v in self.weight.iter().chain(&self.bias) {
            out.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut input: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        input.read_exact(&mut magic)?;
        if &magic != PROJECTOR_MAGIC {
            return Err(Error::format("projector checkpoint", "bad magic"));
        }
        let mut buf4 = [0u8; 4];
        input.read_exact(&mut buf4)?;
        let in_features = u32::from_le_bytes(buf4) as usize;
        input.read_exact(&mut buf4)?;
        let dim = u32::from_le_bytes(buf4) as usize;
        if in_features == 0 || dim == 0 || in_features * dim > 1 << 24 {
            return Err(Error::format(
                "projector checkpoint",
                format!("bad dims {in_features}x{dim}"),
            ));
        }
        let mut buf8 = [0u8; 8];
        let mut next = || -> Result<f64> {
            input.read_exact(&mut buf8)?;
            Ok(f64::from_le_bytes(buf8))
        };
        let weight = (0..in_features * dim)
            .map(|_| next())
            .collect::<Result<Vec<_>>>()?;
        let bias = (0..dim).map(|_| next()).collect::<Result<Vec<_>>>()?;
        LinearProjector::new(in_features, dim, weight, bias)
    }
}

const PROJECTOR_MAGIC: &[u8; 4] = b"LPRJ";

/// Projects every cell: `row(i) = weight^T · pixel(i) + bias`. Not normalized.
pub fn extract_features(img: &ImageGrid, proj: &LinearProjector) -> Result<FeatureMap> {
    if img.channels() != proj.in_features {
        return Err(Error::shape(
            "extract_features channels",
            proj.in_features,
            img.channels(),
        ));
    }
    let d = proj.dim;
    let mut values = Vec::with_capacity(img.shape().len() * d);
    for i in 0..img.shape().len() {
        let px = img.pixel(i);
        let start = values.len();
        values.extend_from_slice(&proj.bias);
        let out = &mut values[start..];
        for (k, &x) in px.iter().enumerate() {
            if x == 0.0 {
                continue;
            }
            let wrow = &proj.weight[k * d..(k + 1) * d];
            for (o, &wv) in out.iter_mut().zip(wrow) {
                *o += x * wv;
            }
        }
    }
    FeatureMap::new(img.shape(), d, values)
}

/// Accumulates `weight_grad += Σ_i pixel(i) ⊗ grad_out(i)` and
/// `bias_grad += Σ_i grad_out(i)`. Images are leaves, so nothing is returned.
pub fn extract_features_backward(
    img: &ImageGrid,
    proj: &mut LinearProjector,
    grad_out: &[f64],
) -> Result<()> {
    let d = proj.dim;
    if img.channels() != proj.in_features {
        return Err(Error::shape(
            "extract_features_backward channels",
            proj.in_features,
            img.channels(),
        ));
    }
    if grad_out.len() != img.shape().len() * d {
        return Err(Error::shape(
            "extract_features_backward grad",
            img.shape().len() * d,
            grad_out.len(),
        ));
    }
    if grad_out.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("feature gradient"));
    }
    for i in 0..img.shape().len() {
        let g = &grad_out[i * d..(i + 1) * d];
        for (b, gv) in proj.bias_grad.iter_mut().zip(g) {
            *b += gv;
        }
        for (k, &x) in img.pixel(i).iter().enumerate() {
            let wg = &mut proj.weight_grad[k * d..(k + 1) * d];
            for (w, gv) in wg.iter_mut().zip(g) {
                *w += x * gv;
            }
        }
    }
    Ok(())
}

/// Divides each nonzero row by its Euclidean norm; zero rows stay zero.
pub fn l2_normalize(f: &FeatureMap) -> FeatureMap {
    let d = f.dim;
    let mut values = f.values.clone();
    for row in values.chunks_exact_mut(d) {
        let n = norm(row);
        if n > 0.0 {
            row.iter_mut().for_each(|v| *v /= n);
        }
    }
    FeatureMap {
        shape: f.shape,
        dim: d,
        values,
        normalized: true,
    }
}

/// Reverse mode of [`l2_normalize`], given the *unnormalized* input map:
/// `grad_x = (I − x̂x̂ᵀ) grad_y / ‖x‖`, zero for zero rows.
pub fn l2_normalize_backward(raw: &FeatureMap, grad_normalized: &[f64]) -> Result<Vec<f64>> {
    let d = raw.dim;
    if grad_normalized.len() != raw.values.len() {
        return Err(Error::shape(
            "l2_normalize_backward grad",
            raw.values.len(),
            grad_normalized.len(),
        ));
    }
    let mut out = vec![0.0; raw.values.len()];
    for ((x, g), o) in raw
        .values
        .chunks_exact(d)
        .zip(grad_normalized.chunks_exact(d))
        .zip(out.chunks_exact_mut(d))
    {
        let n = norm(x);
        if n == 0.0 {
            continue;
        }
        let proj: f64 = x.iter().zip(g).map(|(a, b)| a * b).sum::<f64>() / (n * n);
        for k in 0..d {
            o[k] = (g[k] - x[k] * proj) / n;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn shape(h: usize, w: usize) -> GridShape {
        GridShape::new(h, w).unwrap()
    }

    fn random_image(rng: &mut ChaCha8Rng, s: GridShape, c: usize) -> ImageGrid {
        let v = (0..s.len() * c)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        ImageGrid::new(s, c, v).unwrap()
    }

    #[test]
    fn identity_projector_copies_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, shape(2, 3), 4);
        let f = extract_features(&img, &LinearProjector::identity(4)).unwrap();
        assert_eq!(f.values(), img.values());
        assert!(!f.is_normalized());
    }

    #[test]
    fn zero_weight_yields_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(&mut rng, shape(3, 2), 3);
        let b = vec![0.5, -1.0];
        let p = LinearProjector::new(3, 2, vec![0.0; 6], b.clone()).unwrap();
        let f = extract_features(&img, &p).unwrap();
        for i in 0..6 {
            assert_eq!(f.row(i), &b[..]);
        }
    }

    #[test]
    fn projection_matches_naive_matvec() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(&mut rng, shape(2, 2), 3);
        let mut p = LinearProjector::random(3, 4, 1.0, &mut rng);
        p.bias = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = extract_features(&img, &p).unwrap();
        for i in 0..4 {
            for o in 0..4 {
                let mut acc = p.bias[o];
                for k in 0..3 {
                    acc += p.weight[k * 4 + o] * img.values()[i * 3 + k];
                }
                assert!((f.row(i)[o] - acc).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn channel_mismatch_is_error() {
        let img = ImageGrid::zeros(shape(2, 2), 3);
        assert!(matches!(
            extract_features(&img, &LinearProjector::identity(4)),
            Err(Error::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn normalize_examples() {
        let f = FeatureMap::new(shape(1, 2), 2, vec![3.0, 4.0, 0.0, 0.0]).unwrap();
        let n = l2_normalize(&f);
        assert!((n.row(0)[0] - 0.6).abs() < 1e-15);
        assert!((n.row(0)[1] - 0.8).abs() < 1e-15);
        assert_eq!(n.row(1), &[0.0, 0.0]);
        assert!(n.is_normalized());
        assert_eq!(n.zero_rows(), 1);
    }

    #[test]
    fn normalize_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let v: Vec<f64> = (0..5).map(|_| rng.random_range(-3.0..3.0)).collect();
        let f = FeatureMap::new(shape(1, 1), 5, v.clone()).unwrap();
        let n = l2_normalize(&f);
        let mut ss = 0.0;
        for x in &v {
            ss += x * x;
        }
        let len = ss.sqrt();
        for (got, x) in n.row(0).iter().zip(&v) {
            assert!((got - x / len).abs() < 1e-14);
        }
    }

    #[test]
    fn backward_zero_grad_leaves_accumulators() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = random_image(&mut rng, shape(2, 2), 3);
        let mut p = LinearProjector::random(3, 2, 1.0, &mut rng);
        extract_features_backward(&img, &mut p, &[0.0; 8]).unwrap();
        assert!(p.weight_grad.iter().chain(&p.bias_grad).all(|&g| g == 0.0));
    }

    #[test]
    fn backward_single_cell_outer_product() {
        let img = ImageGrid::new(shape(1, 1), 3, vec![0.5, -2.0, 7.0]).unwrap();
        let mut p = LinearProjector::new(3, 2, vec![0.0; 6], vec![0.0; 2]).unwrap();
        extract_features_backward(&img, &mut p, &[1.0, 0.0]).unwrap();
        // column 0 of the weight gradient is the pixel vector
        assert_eq!(
            [p.weight_grad[0], p.weight_grad[2], p.weight_grad[4]],
            [0.5, -2.0, 7.0]
        );
        assert_eq!(
            [p.weight_grad[1], p.weight_grad[3], p.weight_grad[5]],
            [0.0, 0.0, 0.0]
        );
        assert_eq!(p.bias_grad, vec![1.0, 0.0]);
    }

    #[test]
    fn backward_shape_mismatch() {
        let img = ImageGrid::zeros(shape(2, 2), 3);
        let mut p = LinearProjector::random(3, 2, 1.0, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(extract_features_backward(&img, &mut p, &[0.0; 7]).is_err());
    }

    #[test]
    fn normalize_backward_zero_row_is_zero() {
        let f = FeatureMap::new(shape(1, 1), 3, vec![0.0; 3]).unwrap();
        let g = l2_normalize_backward(&f, &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!(g, vec![0.0; 3]);
    }

    #[test]
    fn csv_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = random_image(&mut rng, shape(3, 2), 2);
        let mut buf = Vec::new();
        img.write_csv(&mut buf).unwrap();
        assert!(buf.starts_with(b"3,2,2\n"));
        let back = ImageGrid::read_csv(&buf[..]).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn projector_checkpoint_layout() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut p = LinearProjector::random(3, 2, 0.5, &mut rng);
        p.bias = vec![0.25, -0.5];
        let mut buf = Vec::new();
        p.write_to(&mut buf).unwrap();
        assert_eq!(&buf[..4], b"LPRJ");
        assert_eq!(&buf[4..12], &[3, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 12 + 8 * 8);
        assert_eq!(&buf[buf.len() - 8..], &(-0.5f64).to_le_bytes());
        assert_eq!(LinearProjector::read_from(&buf[..]).unwrap(), p);
        assert!(LinearProjector::read_from(&buf[..20]).is_err());
    }

    #[test]
    fn csv_rejects_wrong_count() {
        let text = "2,2,1\n1,2,3\n";
        assert!(ImageGrid::read_csv(text.as_bytes()).is_err());
        assert!(ImageGrid::read_csv("2,2\n1,2,3,4\n".as_bytes()).is_err());
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn normalized_rows_have_unit_norm(vals in proptest::collection::vec(-100.0f64..100.0, 12)) {
                let f = FeatureMap::new(shape(2, 2), 3, vals).unwrap();
                let n = l2_normalize(&f);
                for i in 0..4 {
                    let r = norm(n.row(i));
                    prop_assert!(r == 0.0 || (r - 1.0).abs() <= 1e-6);
                }
            }

            #[test]
            fn projection_is_linear_without_bias(
                a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0u64..1000,
            ) {
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let s = shape(2, 3);
                let i1 = random_image(&mut rng, s, 3);
                let i2 = random_image(&mut rng, s, 3);
                let p = LinearProjector::random(3, 4, 1.0, &mut rng);
                let mix: Vec<f64> = i1.values().iter().zip(i2.values()).map(|(x, y)| a * x + b * y).collect();
                let mixed = extract_features(&ImageGrid::new(s, 3, mix).unwrap(), &p).unwrap();
                let f1 = extract_features(&i1, &p).unwrap();
                let f2 = extract_features(&i2, &p).unwrap();
                for k in 0..mixed.values().len() {
                    let expect = a * f1.values()[k] + b * f2.values()[k];
                    prop_assert!((mixed.values()[k] - expect).abs() < 1e-9);
                }
            }
        }
    }
}

//! Patch-linear backbone with a global-average-pooled embedding head.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};
use rand::Rng;

use crate::imaging::OpticalDensity;
use crate::layers::{relu, relu_backward, Linear, LinearGrad};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EncoderError {
    #[error("image {width}×{height} does not tile into a {grid}×{grid} grid")]
    Tiling { width: usize, height: usize, grid: usize },
    #[error("patch rows have {got} columns, encoder expects {expected}")]
    Width { got: usize, expected: usize },
}

/// Shared affine map over `grid × grid` patches (the feature map), mean pool,
/// then an affine projector to the embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchLinearEncoder {
    pub grid: usize,
    /// Fixed input centre subtracted from every patch row; not trained.
    pub offset: Array1<f64>,
    pub patch: Linear,
    pub projector: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrad {
    pub patch: LinearGrad,
    pub projector: LinearGrad,
}

/// Forward activations for `m` images, `grid²` rows per image.
#[derive(Debug, Clone)]
pub struct FeatureCache {
    /// Centred input rows.
    pub patches: Array2<f64>,
    pub pre: Array2<f64>,
    /// Rectified feature map, one row per (image, position).
    pub maps: Array2<f64>,
    /// `m × D_b`
    pub pooled: Array2<f64>,
}

impl PatchLinearEncoder {
    pub fn new(patch_len: usize, grid: usize, features: usize, embed: usize, rng: &mut impl Rng) -> Self {
        Self {
            grid,
            offset: Array1::zeros(patch_len),
            patch: Linear::new(patch_len, features, rng),
            projector: Linear::new(features, embed, rng),
        }
    }

    pub fn positions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn features(&self) -> usize {
        self.patch.outputs()
    }

    pub fn embed_dim(&self) -> usize {
        self.projector.outputs()
    }

    pub fn forward_features(&self, mut patches: Array2<f64>) -> Result<FeatureCache, EncoderError> {
        if patches.ncols() != self.patch.inputs() {
            return Err(EncoderError::Width {
                got: patches.ncols(),
                expected: self.patch.inputs(),
            });
        }
        patches -= &self.offset;
        let p = self.positions();
        let pre = self.patch.forward(patches.view());
        let maps = relu(&pre);
        let m = maps.nrows() / p;
        let pooled = maps
            .view()
            .into_shape_with_order((m, p, self.features()))
            .expect("rows are image-major")
            .mean_axis(Axis(1))
            .expect("at least one position");
        Ok(FeatureCache {
            patches,
            pre,
            maps,
            pooled,
        })
    }

    /// Projected and L2-normalised embeddings with the pre-normalisation rows.
    pub fn embed(&self, pooled: ArrayView2<f64>) -> (Array2<f64>, Array2<f64>) {
        let y = self.projector.forward(pooled);
        let mut z = y.clone();
        for mut row in z.rows_mut() {
            let n = row.dot(&row).sqrt().max(f64::MIN_POSITIVE);
            row /= n;
        }
        (y, z)
    }

    /// Backward through the projector and normalisation, returning the
    /// projector gradient and the gradient on the pooled features.
    pub fn embed_backward(
        &self,
        pooled: ArrayView2<f64>,
        y: &Array2<f64>,
        z: &Array2<f64>,
        grad_z: ArrayView2<f64>,
    ) -> (LinearGrad, Array2<f64>) {
        let mut grad_y = grad_z.to_owned();
        for ((mut g, zr), yr) in grad_y.rows_mut().into_iter().zip(z.rows()).zip(y.rows()) {
            let n = yr.dot(&yr).sqrt().max(f64::MIN_POSITIVE);
            let along = zr.dot(&g);
            g.scaled_add(-along, &zr);
            g /= n;
        }
        self.projector.backward(pooled, grad_y.view())
    }

    /// Patch-layer gradient given gradients on the pooled features and,
    /// optionally, directly on the feature map.
    pub fn features_backward(
        &self,
        cache: &FeatureCache,
        grad_pooled: ArrayView2<f64>,
        grad_maps: Option<ArrayView2<f64>>,
    ) -> LinearGrad {
        let p = self.positions();
        let mut grad = match grad_maps {
            Some(g) => g.to_owned(),
            None => Array2::zeros(cache.maps.raw_dim()),
        };
        for (i, row) in grad_pooled.rows().into_iter().enumerate() {
            let mut block = grad.slice_mut(s![i * p..(i + 1) * p, ..]);
            block.scaled_add(1.0 / p as f64, &row.insert_axis(Axis(0)));
        }
        relu_backward(&cache.pre, &mut grad);
        self.patch.backward(cache.patches.view(), grad.view()).0
    }

    pub fn apply(&mut self, grad: &EncoderGrad, lr: f64) {
        self.patch.apply(&grad.patch, lr);
        self.projector.apply(&grad.projector, lr);
    }

    pub fn is_finite(&self) -> bool {
        self.patch.is_finite() && self.projector.is_finite()
    }

    /// Order-sensitive FNV-1a over every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        let layers = [&self.patch, &self.projector];
        let params = layers.iter().flat_map(|l| l.weight.iter().chain(l.bias.iter()));
        for v in self.offset.iter().chain(params) {
            for b in v.to_bits().to_le_bytes() {
                h = (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3);
            }
        }
        h
    }
}

/// Length of one flattened patch.
pub fn patch_len(width: usize, height: usize, grid: usize) -> usize {
    3 * (width / grid.max(1)) * (height / grid.max(1))
}

/// `grid²` rows of flattened `(y, x, channel)` patch values, row-major over
/// the grid.
pub fn patch_rows(od: &OpticalDensity, grid: usize) -> Result<Array2<f64>, EncoderError> {
    let (w, h) = (od.width(), od.height());
    if grid == 0 || w % grid != 0 || h % grid != 0 {
        return Err(EncoderError::Tiling {
            width: w,
            height: h,
            grid,
        });
    }
    let (pw, ph) = (w / grid, h / grid);
    let v = od.values();
    let mut out = Array2::zeros((grid * grid, 3 * pw * ph));
    for gy in 0..grid {
        for gx in 0..grid {
            let mut row = out.row_mut(gy * grid + gx);
            let mut k = 0;
            for y in gy * ph..(gy + 1) * ph {
                for x in gx * pw..(gx + 1) * pw {
                    for c in 0..3 {
                        row[k] = v[[c, y * w + x]];
                        k += 1;
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Stacks per-image patch blocks in order.
pub fn stack_rows<'a>(blocks: impl IntoIterator<Item = &'a Array2<f64>>) -> Array2<f64> {
    let views: Vec<ArrayView2<f64>> = blocks.into_iter().map(|b| b.view()).collect();
    ndarray::concatenate(Axis(0), &views).expect("equal patch widths")
}

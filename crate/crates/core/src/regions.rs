//! Region feature matrices and the providers that produce them.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{DmanError, Result};
use crate::tensor::Tensor;

/// `D` region vectors of dimension `M_feat`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionFeatures {
    regions: usize,
    dim: usize,
    data: Vec<f64>,
}

impl RegionFeatures {
    pub fn new(regions: usize, dim: usize, data: Vec<f64>) -> Result<Self> {
        if regions == 0 || dim == 0 {
            return Err(DmanError::Input(format!(
                "region features need D >= 1 and M_feat >= 1, got {regions}x{dim}"
            )));
        }
        if data.len() != regions * dim {
            return Err(DmanError::Input(format!(
                "region features: {} values for shape {regions}x{dim}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(DmanError::Input("region features contain non-finite values".into()));
        }
        Ok(Self { regions, dim, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(DmanError::Input("ragged region rows".into()));
        }
        Self::new(rows.len(), dim, rows.concat())
    }

    /// Number of regions `D`.
    pub fn regions(&self) -> usize {
        self.regions
    }

    /// Feature dimension `M_feat`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn row(&self, j: usize) -> &[f64] {
        &self.data[j * self.dim..(j + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(vec![self.regions, self.dim], self.data.clone()).expect("shape checked at construction")
    }
}

/// A raw `c × h × w` image tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct RawImage {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

/// What a provider is asked to featurize.
#[derive(Debug, Clone, Copy)]
pub enum RegionInput<'a> {
    /// Index into a store of precomputed features.
    Stored(usize),
    Image(&'a RawImage),
}

/// Maps an image (or a reference to stored features) to its region matrix.
pub trait RegionProvider {
    fn image_to_regions(&self, input: RegionInput<'_>) -> Result<RegionFeatures>;

    /// `(D, M_feat)` of every matrix this provider returns.
    fn output_shape(&self) -> (usize, usize);
}

/// Serves region matrices loaded from a feature file.
#[derive(Debug, Clone)]
pub struct FilePrecomputed {
    features: Vec<RegionFeatures>,
    shape: (usize, usize),
}

impl FilePrecomputed {
    pub fn new(features: Vec<RegionFeatures>) -> Result<Self> {
        let first = features
            .first()
            .ok_or_else(|| DmanError::Input("no precomputed region features".into()))?;
        let shape = (first.regions(), first.dim());
        if let Some(bad) = features.iter().position(|f| (f.regions(), f.dim()) != shape) {
            return Err(DmanError::Input(format!(
                "region matrix {bad} does not have shape {}x{}",
                shape.0, shape.1
            )));
        }
        Ok(Self { features, shape })
    }
}

impl RegionProvider for FilePrecomputed {
    fn image_to_regions(&self, input: RegionInput<'_>) -> Result<RegionFeatures> {
        match input {
            RegionInput::Stored(i) => self
                .features
                .get(i)
                .cloned()
                .ok_or_else(|| DmanError::Input(format!("no stored regions for node {i}"))),
            RegionInput::Image(_) => Err(DmanError::Input(
                "precomputed provider cannot featurize raw images".into(),
            )),
        }
    }

    fn output_shape(&self) -> (usize, usize) {
        self.shape
    }
}

/// Tiles an image into a `grid_h × grid_w` patch grid and maps each
/// flattened patch through a fixed seeded Gaussian projection.
#[derive(Debug, Clone)]
pub struct PatchProjector {
    channels: usize,
    height: usize,
    width: usize,
    grid_h: usize,
    grid_w: usize,
    dim: usize,
    /// `dim × patch_len`, row-major.
    projection: Vec<f64>,
}

impl PatchProjector {
    pub fn new(
        (channels, height, width): (usize, usize, usize),
        (grid_h, grid_w): (usize, usize),
        dim: usize,
        seed: u64,
    ) -> Result<Self> {
        if grid_h == 0 || grid_w == 0 || dim == 0 || channels == 0 {
            return Err(DmanError::Config("patch projector needs non-zero grid, channels and dim".into()));
        }
        if height % grid_h != 0 || width % grid_w != 0 {
            return Err(DmanError::Config(format!(
                "image {height}x{width} does not tile into a {grid_h}x{grid_w} grid"
            )));
        }
        let patch_len = channels * (height / grid_h) * (width / grid_w);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let scale = 1.0 / (patch_len as f64).sqrt();
        let projection = (0..dim * patch_len)
            .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, &mut rng))
            .collect::<Vec<f64>>();
        Ok(Self {
            channels,
            height,
            width,
            grid_h,
            grid_w,
            dim,
            projection,
        })
    }

    /// Picks the most square grid with exactly `regions` cells that tiles the image.
    pub fn grid_for(regions: usize, height: usize, width: usize) -> Option<(usize, usize)> {
        (1..=regions)
            .filter(|&gh| regions.is_multiple_of(gh))
            .map(|gh| (gh, regions / gh))
            .filter(|&(gh, gw)| height.is_multiple_of(gh) && width.is_multiple_of(gw))
            .min_by_key(|&(gh, gw)| gh.abs_diff(gw))
    }

    fn project(&self, image: &RawImage) -> Result<RegionFeatures> {
        if (image.channels, image.height, image.width) != (self.channels, self.height, self.width)
            || image.data.len() != self.channels * self.height * self.width
        {
            return Err(DmanError::Input(format!(
                "image {}x{}x{} does not match projector {}x{}x{}",
                image.channels, image.height, image.width, self.channels, self.height, self.width
            )));
        }
        let (ph, pw) = (self.height / self.grid_h, self.width / self.grid_w);
        let patch_len = self.channels * ph * pw;
        let mut out = Vec::with_capacity(self.grid_h * self.grid_w * self.dim);
        let mut patch = vec![0.0; patch_len];
        for gy in 0..self.grid_h {
            for gx in 0..self.grid_w {
                let mut n = 0;
                for c in 0..self.channels {
                    for y in 0..ph {
                        let row = (c * self.height + gy * ph + y) * self.width + gx * pw;
                        patch[n..n + pw].copy_from_slice(&image.data[row..row + pw]);
                        n += pw;
                    }
                }
                for m in 0..self.dim {
                    let w = &self.projection[m * patch_len..(m + 1) * patch_len];
                    out.push(w.iter().zip(&patch).map(|(a, b)| a * b).sum());
                }
            }
        }
        RegionFeatures::new(self.grid_h * self.grid_w, self.dim, out)
    }
}

impl RegionProvider for PatchProjector {
    fn image_to_regions(&self, input: RegionInput<'_>) -> Result<RegionFeatures> {
        match input {
            RegionInput::Image(img) => self.project(img),
            RegionInput::Stored(_) => Err(DmanError::Input(
                "patch projector needs a raw image, not a stored index".into(),
            )),
        }
    }

    fn output_shape(&self) -> (usize, usize) {
        (self.grid_h * self.grid_w, self.dim)
    }
}

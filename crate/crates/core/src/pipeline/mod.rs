//! Two-stage reconstruction: carve, coarse features, coarse TSDF, upsample
//! and narrow band, fine features with the coarse export, final TSDF, mesh.

mod train;

pub use train::{train_stage, GroundTruth, TrainOptions, TrainReport, TrainStage};

use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::featproj::{build_feature_volume, Conv2dNet, ExtractorConfig, FeatureExtractor, HandcraftedOptions};
use crate::geometry::{CameraView, ImageBuffer, TriangleMesh, Vec3, VolumeSpec};
use crate::io::Capture;
use crate::sparsecnn::{
    coarse_unet, decode_raw, fine_net, forward, load_checkpoint, CoarseNetConfig, FineNetConfig, NetworkGraph,
    EXPORT_TAP,
};
use crate::sparsevol::{
    carve_visual_hull, narrow_band, pack, upsample_to, ActiveSet, DepthBand, SparseField, DEFAULT_SINGLE_VIEW_BAND,
};
use crate::texture::TextureNetConfig;
use crate::tsdf::{extract_mesh, TsdfVolume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub coarse_resolution: u32,
    pub fine_resolution: u32,
    /// Centre and edge length (cm) of the reconstruction cube.
    pub volume_center: [f64; 3],
    pub volume_edge: f64,
    pub truncation: f64,
    pub bias_c: f64,
    pub bias_f: f64,
    pub band_threshold: f64,
    pub texture_band: f64,
    /// Expected number of views; `None` accepts any.
    pub views: Option<usize>,
    pub single_view_band: DepthBand,
    pub shape_extractor: ExtractorConfig,
    pub normal_extractor: ExtractorConfig,
    pub texture_extractor: ExtractorConfig,
    pub coarse_net: CoarseNetConfig,
    pub fine_net: FineNetConfig,
    pub texture_net: TextureNetConfig,
    pub coarse_checkpoint: Option<String>,
    pub fine_checkpoint: Option<String>,
    pub texture_checkpoint: Option<String>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            coarse_resolution: 256,
            fine_resolution: 512,
            volume_center: [0.0; 3],
            volume_edge: 256.0,
            truncation: 5.0,
            bias_c: 5.0,
            bias_f: 3.0,
            band_threshold: 3.0,
            texture_band: 1.0,
            views: None,
            single_view_band: DEFAULT_SINGLE_VIEW_BAND,
            shape_extractor: ExtractorConfig::Handcrafted {
                channels: 128,
                size: 256,
            },
            normal_extractor: ExtractorConfig::Handcrafted {
                channels: 128,
                size: 256,
            },
            texture_extractor: ExtractorConfig::Handcrafted { channels: 32, size: 256 },
            coarse_net: CoarseNetConfig::default(),
            fine_net: FineNetConfig::default(),
            texture_net: TextureNetConfig::default(),
            coarse_checkpoint: None,
            fine_checkpoint: None,
            texture_checkpoint: None,
        }
    }
}

pub(crate) fn make_extractor(cfg: &ExtractorConfig) -> Result<FeatureExtractor> {
    Ok(match cfg {
        ExtractorConfig::Handcrafted { channels, size } => FeatureExtractor::Handcrafted(HandcraftedOptions {
            channels: *channels,
            size: *size,
        }),
        ExtractorConfig::Loaded { weights } => FeatureExtractor::Loaded(Conv2dNet::load(weights)?),
    })
}

impl PipelineConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.fine_resolution != 2 * self.coarse_resolution {
            return Err(Error::Config(format!(
                "fine resolution {} must be twice the coarse resolution {}",
                self.fine_resolution, self.coarse_resolution
            )));
        }
        if !(self.band_threshold > 0.0 && self.band_threshold <= self.bias_f && self.bias_f <= self.truncation) {
            return Err(Error::Config(format!(
                "need 0 < band threshold ({}) <= bias_f ({}) <= truncation ({})",
                self.band_threshold, self.bias_f, self.truncation
            )));
        }
        if !(self.bias_c > 0.0 && self.bias_c <= self.truncation) {
            return Err(Error::Config("bias_c must lie in (0, truncation]".into()));
        }
        if !(self.texture_band > 0.0) {
            return Err(Error::Config("texture band must be positive".into()));
        }
        let channels = |e: &ExtractorConfig| match e {
            ExtractorConfig::Handcrafted { channels, .. } => Some(*channels),
            ExtractorConfig::Loaded { .. } => None,
        };
        if channels(&self.shape_extractor).is_some_and(|c| c != self.coarse_net.input_channels) {
            return Err(Error::Config("shape extractor channels must match the coarse net input".into()));
        }
        if channels(&self.normal_extractor).is_some_and(|c| c != self.fine_net.feature_channels) {
            return Err(Error::Config("normal extractor channels must match the fine net features".into()));
        }
        if channels(&self.texture_extractor).is_some_and(|c| c != self.texture_net.feature_channels) {
            return Err(Error::Config("texture extractor channels must match the texture net features".into()));
        }
        if self.fine_net.export_channels != self.coarse_net.export_channels {
            return Err(Error::Config("fine and coarse nets disagree on export channels".into()));
        }
        self.coarse_spec().map(|_| ())
    }

    pub fn coarse_spec(&self) -> Result<VolumeSpec> {
        VolumeSpec::centered(Vec3::from(self.volume_center), self.volume_edge, self.coarse_resolution)
    }

    pub fn fine_spec(&self) -> Result<VolumeSpec> {
        VolumeSpec::centered(Vec3::from(self.volume_center), self.volume_edge, self.fine_resolution)
    }
}

/// Coarse and (optionally) fine networks ready for inference.
#[derive(Debug, Clone)]
pub struct Networks {
    pub coarse: NetworkGraph,
    pub fine: Option<NetworkGraph>,
}

impl Networks {
    /// Builds the configured architectures and loads their checkpoints.
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        let path = cfg
            .coarse_checkpoint
            .as_ref()
            .ok_or_else(|| Error::Config("the coarse stage needs a checkpoint".into()))?;
        let mut coarse = coarse_unet(&cfg.coarse_net);
        load_checkpoint(&mut coarse, path)?;
        let fine = match &cfg.fine_checkpoint {
            Some(p) => {
                let mut g = fine_net(&cfg.fine_net);
                load_checkpoint(&mut g, p)?;
                Some(g)
            }
            None => None,
        };
        Ok(Self { coarse, fine })
    }
}

/// Output of the coarse stage.
#[derive(Debug, Clone)]
pub struct CoarseOutput {
    pub hull: Arc<ActiveSet>,
    pub raw: SparseField,
    pub tsdf: TsdfVolume,
    pub export: SparseField,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FineStatus {
    Refined,
    /// No fine network: the final TSDF is the upsampled coarse TSDF on the band.
    SkippedNoNetwork,
    /// The band was empty; the final TSDF is the upsampled coarse TSDF.
    EmptyBandFallback,
}

#[derive(Debug, Clone)]
pub struct FineOutput {
    pub band: Arc<ActiveSet>,
    pub tsdf: TsdfVolume,
    pub status: FineStatus,
}

/// Stage wall-clock times in milliseconds.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct StageTimings {
    pub vh: f64,
    pub coarse_features: f64,
    pub coarse_conv: f64,
    pub nb: f64,
    pub fine_features: f64,
    pub fine_conv: f64,
    pub extraction: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReconstructionReport {
    pub views: usize,
    pub coarse_resolution: u32,
    pub fine_resolution: u32,
    pub hull_sites: usize,
    pub hull_fraction: f64,
    pub band_sites: usize,
    pub band_fraction: f64,
    pub fine_stage: FineStatus,
    pub vertices: usize,
    pub triangles: usize,
    pub timings_ms: StageTimings,
}

fn ms(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

pub(crate) fn feature_maps(extractor: &FeatureExtractor, images: &[ImageBuffer]) -> Result<Vec<ImageBuffer>> {
    images.iter().map(|i| extractor.extract(i)).collect()
}

/// Visual hull on the coarse grid.
pub fn carve(cfg: &PipelineConfig, cameras: &[CameraView], masks: &[ImageBuffer]) -> Result<Arc<ActiveSet>> {
    if let Some(v) = cfg.views {
        if v != cameras.len() {
            return Err(Error::Config(format!("config expects {v} views, capture has {}", cameras.len())));
        }
    }
    Ok(Arc::new(carve_visual_hull(&cfg.coarse_spec()?, cameras, masks, Some(cfg.single_view_band))?))
}

/// Runs the coarse network on a prepared feature field.
pub fn coarse_from_features(cfg: &PipelineConfig, net: &NetworkGraph, features: &SparseField) -> Result<CoarseOutput> {
    let plan = net.plan(features.active().clone())?;
    let cache = forward(net, &plan, features)?;
    let raw = cache.field(net, &plan, net.output_node());
    let export_node = net
        .tap(EXPORT_TAP)
        .ok_or_else(|| Error::Config("coarse network has no export tap".into()))?;
    let export = cache.field(net, &plan, export_node);
    let tsdf = decode_raw(&raw, cfg.bias_c, cfg.truncation)?;
    Ok(CoarseOutput {
        hull: features.active().clone(),
        raw,
        tsdf,
        export,
    })
}

pub fn coarse_stage(
    images: &[ImageBuffer],
    masks: &[ImageBuffer],
    cameras: &[CameraView],
    cfg: &PipelineConfig,
    net: &NetworkGraph,
) -> Result<CoarseOutput> {
    let hull = carve(cfg, cameras, masks)?;
    let maps = feature_maps(&make_extractor(&cfg.shape_extractor)?, images)?;
    let features = build_feature_volume(&hull, cameras, &maps)?.field;
    coarse_from_features(cfg, net, &features)
}

/// The eight fine sites inside every coarse site.
pub fn children(set: &ActiveSet) -> ActiveSet {
    let spec = set.spec().doubled();
    let mut keys: Vec<u64> = set
        .sites()
        .par_iter()
        .flat_map_iter(|s| {
            let s = *s;
            (0..8u32).map(move |b| pack([2 * s[0] + (b >> 2 & 1), 2 * s[1] + (b >> 1 & 1), 2 * s[2] + (b & 1)]))
        })
        .collect();
    keys.par_sort_unstable();
    let mask = (1u64 << 21) - 1;
    let sites = keys
        .into_iter()
        .map(|k| [(k >> 42) as u32, (k >> 21 & mask) as u32, (k & mask) as u32])
        .collect();
    ActiveSet::from_sorted_unchecked(spec, sites)
}

/// Upsampled coarse TSDF on the fine children of its active set, and the
/// narrow band of it.
pub fn fine_band(cfg: &PipelineConfig, coarse: &TsdfVolume) -> Result<(SparseField, Arc<ActiveSet>)> {
    let target = Arc::new(children(coarse.active()));
    let up = upsample_to(coarse.field(), target)?;
    let band = Arc::new(narrow_band(&up, cfg.band_threshold)?);
    Ok((up, band))
}

/// Fine-network input on `band`: normal features then the upsampled export.
pub fn fine_input(
    band: &Arc<ActiveSet>,
    export: &SparseField,
    normal_maps: &[ImageBuffer],
    cameras: &[CameraView],
) -> Result<SparseField> {
    let nf = build_feature_volume(band, cameras, normal_maps)?.field;
    let ex = upsample_to(export, band.clone())?;
    SparseField::concat(&[&nf, &ex])
}

pub fn fine_stage(
    coarse: &CoarseOutput,
    normal_images: Option<&[ImageBuffer]>,
    cameras: &[CameraView],
    cfg: &PipelineConfig,
    net: Option<&NetworkGraph>,
) -> Result<FineOutput> {
    Ok(fine_stage_timed(coarse, normal_images, cameras, cfg, net)?.0)
}

fn fine_stage_timed(
    coarse: &CoarseOutput,
    normal_images: Option<&[ImageBuffer]>,
    cameras: &[CameraView],
    cfg: &PipelineConfig,
    net: Option<&NetworkGraph>,
) -> Result<(FineOutput, [f64; 3])> {
    let t = Instant::now();
    let (up, band) = fine_band(cfg, &coarse.tsdf)?;
    let nb = ms(t);
    let fallback = |band: Arc<ActiveSet>, status| -> Result<FineOutput> {
        let field = up.restrict(band.clone())?;
        Ok(FineOutput {
            band,
            tsdf: TsdfVolume::from_clamped(field, cfg.truncation)?,
            status,
        })
    };
    if band.is_empty() {
        log::warn!("fine band is empty; keeping the upsampled coarse TSDF");
        let all = up.active().clone();
        return Ok((fallback(all, FineStatus::EmptyBandFallback)?, [nb, 0.0, 0.0]));
    }
    let Some(net) = net else {
        return Ok((fallback(band, FineStatus::SkippedNoNetwork)?, [nb, 0.0, 0.0]));
    };
    let normals = normal_images.ok_or_else(|| Error::Config("the fine stage needs normal maps".into()))?;
    let t = Instant::now();
    let maps = feature_maps(&make_extractor(&cfg.normal_extractor)?, normals)?;
    let input = fine_input(&band, &coarse.export, &maps, cameras)?;
    let features = ms(t);
    let t = Instant::now();
    let plan = net.plan(band.clone())?;
    let cache = forward(net, &plan, &input)?;
    let raw = cache.field(net, &plan, net.output_node());
    let tsdf = decode_raw(&raw, cfg.bias_f, cfg.truncation)?;
    Ok((
        FineOutput {
            band,
            tsdf,
            status: FineStatus::Refined,
        },
        [nb, features, ms(t)],
    ))
}

/// Full reconstruction of a capture into a mesh plus a stage report.
pub fn reconstruct(capture: &Capture, cfg: &PipelineConfig, nets: &Networks) -> Result<(TriangleMesh, ReconstructionReport)> {
    cfg.validate()?;
    let total = Instant::now();
    let mut timings = StageTimings::default();
    let t = Instant::now();
    let hull = carve(cfg, &capture.cameras, &capture.masks)?;
    timings.vh = ms(t);
    let t = Instant::now();
    let maps = feature_maps(&make_extractor(&cfg.shape_extractor)?, &capture.colors)?;
    let features = build_feature_volume(&hull, &capture.cameras, &maps)?.field;
    timings.coarse_features = ms(t);
    let t = Instant::now();
    let coarse = coarse_from_features(cfg, &nets.coarse, &features)?;
    timings.coarse_conv = ms(t);
    let (fine, [nb, ff, fc]) = fine_stage_timed(
        &coarse,
        capture.normals.as_deref(),
        &capture.cameras,
        cfg,
        nets.fine.as_ref(),
    )?;
    timings.nb = nb;
    timings.fine_features = ff;
    timings.fine_conv = fc;
    let t = Instant::now();
    let mesh = extract_mesh(&fine.tsdf, Some(&coarse.tsdf))?;
    timings.extraction = ms(t);
    timings.total = ms(total);
    let cube = |r: u32| (r as f64).powi(3);
    let report = ReconstructionReport {
        views: capture.len(),
        coarse_resolution: cfg.coarse_resolution,
        fine_resolution: cfg.fine_resolution,
        hull_sites: hull.len(),
        hull_fraction: hull.len() as f64 / cube(cfg.coarse_resolution),
        band_sites: fine.band.len(),
        band_fraction: fine.band.len() as f64 / cube(cfg.fine_resolution),
        fine_stage: fine.status,
        vertices: mesh.vertices.len(),
        triangles: mesh.triangles.len(),
        timings_ms: timings,
    };
    Ok((mesh, report))
}

/// Mesh of the visual hull itself: marching cubes of the hull indicator
/// (`-h/2` inside, `+h/2` outside).
pub fn hull_mesh(hull: &Arc<ActiveSet>) -> Result<TriangleMesh> {
    let h = hull.spec().spacing();
    let field = SparseField::constant(hull.clone(), 1, -0.5 * h, 0.5 * h);
    extract_mesh(&TsdfVolume::new(field, 0.5 * h)?, None)
}

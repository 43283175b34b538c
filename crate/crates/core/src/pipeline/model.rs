use std::sync::atomic::{AtomicUsize, Ordering};

use image::RgbImage;

use crate::autograd::{Tape, Var};
use crate::background::BackgroundAlignment;
use crate::detection::{Detector, DetectorConfig};
use crate::error::Result;
use crate::nn::{Bound, ParamStore};
use crate::tensor::Tensor;

pub const IMAGE_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
pub const IMAGE_STD: [f64; 3] = [0.229, 0.224, 0.225];

/// Detector plus the alignment block, sharing one parameter store.
///
/// Alignment parameters always exist so the checkpoint layout does not
/// depend on which modules are switched on.
#[derive(Debug)]
pub struct Model {
    pub config: DetectorConfig,
    pub seed: u64,
    pub store: ParamStore,
    pub detector: Detector,
    pub bda: BackgroundAlignment,
    backbone_passes: AtomicUsize,
}

impl Model {
    pub fn new(config: &DetectorConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, seed, config);
        let bda = BackgroundAlignment::new(&mut store, seed, "bda", config.fusion_width);
        Self {
            config: config.clone(),
            seed,
            store,
            detector,
            bda,
            backbone_passes: AtomicUsize::new(0),
        }
    }

    /// Fused features of an image batch; counts one backbone pass per image.
    pub fn features(&self, tape: &mut Tape, params: &Bound, image: Var) -> Result<Var> {
        let n = tape.value(image).shape().first().copied().unwrap_or(0);
        self.backbone_passes.fetch_add(n, Ordering::Relaxed);
        self.detector.features(tape, params, image)
    }

    /// Images pushed through the backbone since construction.
    pub fn backbone_passes(&self) -> usize {
        self.backbone_passes.load(Ordering::Relaxed)
    }
}

/// The detector alone, with nothing temporal around it.
#[derive(Debug)]
pub struct BaseDetector {
    pub store: ParamStore,
    pub detector: Detector,
}

impl BaseDetector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Self {
        let mut store = ParamStore::new();
        let detector = Detector::new(&mut store, seed, config);
        Self { store, detector }
    }
}

/// `[3, H, W]` tensor with values in `[0, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut t = Tensor::zeros(&[3, h, w]);
    let data = t.data_mut();
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] = px[c] as f64 / 255.0;
        }
    }
    t
}

/// Stacks `[3, H, W]` images into a normalized `[N, 3, H, W]` batch.
pub fn batch_tensor<'a>(images: impl IntoIterator<Item = &'a Tensor>) -> Result<Tensor> {
    let normalized: Vec<Tensor> = images
        .into_iter()
        .map(|img| {
            let hw = img.len() / 3;
            let mut data = img.data().to_vec();
            for (c, plane) in data.chunks_mut(hw).enumerate() {
                for v in plane {
                    *v = (*v - IMAGE_MEAN[c]) / IMAGE_STD[c];
                }
            }
            let mut shape = vec![1];
            shape.extend_from_slice(img.shape());
            Tensor::from_vec(&shape, data)
        })
        .collect::<Result<_>>()?;
    let refs: Vec<&Tensor> = normalized.iter().collect();
    Tensor::concat_batch(&refs)
}

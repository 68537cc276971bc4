//! Extractor + generator pair sharing one parameter store.

use crate::autograd::{Graph, ParamStore};
use crate::error::{shape_err, Error, Result};
use crate::extractor::{extract_domain_code, DomainCode, ExtractorConfig, ExtractorNet};
use crate::generator::{GeneratorConfig, GeneratorNet};
use crate::losses::CodeQuadruple;
use crate::nn::{Initializer, Mode, RegionMask};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub extractor: ExtractorConfig,
    pub generator: GeneratorConfig,
}

impl ModelConfig {
    pub fn code_dim(&self) -> usize {
        self.extractor.code_dim
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            extractor: ExtractorConfig::default(),
            generator: GeneratorConfig::default(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct HarmonizationModel<T> {
    pub store: ParamStore<T>,
    pub extractor: ExtractorNet,
    pub generator: GeneratorNet,
}

impl<T: Scalar> HarmonizationModel<T> {
    /// Builds both networks with weights drawn from N(0, init_std^2).
    pub fn new(cfg: &ModelConfig, seed: u64, init_std: f64) -> Result<Self> {
        if cfg.extractor.code_dim != cfg.generator.code_dim {
            return Err(Error::Config(format!(
                "extractor code dim {} differs from generator code dim {}",
                cfg.extractor.code_dim, cfg.generator.code_dim
            )));
        }
        let mut store = ParamStore::new();
        let mut init = Initializer::new(seed, init_std);
        let extractor = ExtractorNet::new(&mut store, &cfg.extractor, &mut init)?;
        let generator = GeneratorNet::new(&mut store, &cfg.generator, &mut init)?;
        Ok(Self {
            store,
            extractor,
            generator,
        })
    }

    pub fn code_dim(&self) -> usize {
        self.extractor.code_dim()
    }

    /// Sides must be at least the extractor minimum and divisible by the
    /// generator's downsampling factor.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let min = self.extractor.min_resolution();
        let m = self.generator.size_multiple();
        if height < min || width < min || height % m != 0 || width % m != 0 {
            return Err(Error::Resolution {
                height,
                width,
                reason: format!("sides must be >= {min} and divisible by {m}"),
            });
        }
        Ok(())
    }

    pub fn extract_code(&self, image: &Tensor<T>, region: &RegionMask) -> Result<DomainCode<T>> {
        extract_domain_code(image, region, &self.extractor, &self.store)
    }

    /// Generator pass with an explicit mask channel and the code of another region.
    fn translate(&self, composite: &Tensor<T>, mask_channel: &RegionMask, code_region: &RegionMask) -> Result<Tensor<T>> {
        let (c, h, w) = composite.dims3()?;
        if c != 3 {
            return Err(shape_err("harmonize", format!("expected 3 channels, got {c}")));
        }
        if (mask_channel.height(), mask_channel.width()) != (h, w) {
            return Err(shape_err(
                "harmonize",
                format!("mask {}x{} for image {h}x{w}", mask_channel.height(), mask_channel.width()),
            ));
        }
        self.check_resolution(h, w)?;
        let mut g = Graph::new();
        let img = g.constant(composite.clone().reshape(vec![1, 3, h, w])?);
        let code_mask = RegionMask::stack::<T>(&[code_region])?;
        let code = self.extractor.forward(&mut g, &self.store, img, &code_mask, Mode::Eval)?;
        let code_map = g.replicate(code, h, w)?;
        let mask = g.constant(RegionMask::stack::<T>(&[mask_channel])?);
        let input = g.concat(&[img, mask, code_map])?;
        let out = self.generator.forward(&mut g, &self.store, input, Mode::Eval)?;
        g.value(out).clone().reshape(vec![3, h, w])
    }

    /// Translates the image into the domain of its background, guided by
    /// the background code.
    pub fn harmonize(&self, composite: &Tensor<T>, fg_mask: &RegionMask) -> Result<Tensor<T>> {
        let background = fg_mask.complement();
        if background.is_empty() {
            return Err(Error::EmptyRegion("foreground mask covers the whole image; no background".into()));
        }
        if fg_mask.is_empty() {
            return Err(Error::EmptyRegion("foreground mask is empty".into()));
        }
        self.translate(composite, fg_mask, &background)
    }

    /// Translates the background into the domain of the foreground: the
    /// mask channel is the background mask and the code comes from the
    /// composite foreground.
    pub fn background_harmonize(&self, composite: &Tensor<T>, fg_mask: &RegionMask) -> Result<Tensor<T>> {
        if fg_mask.is_empty() {
            return Err(Error::EmptyRegion("foreground mask is empty; no code source".into()));
        }
        let background = fg_mask.complement();
        if background.is_empty() {
            return Err(Error::EmptyRegion("background is empty; nothing to translate".into()));
        }
        self.translate(composite, &background, fg_mask)
    }

    /// Harmonizes `composite` and extracts all four codes of the triplet.
    pub fn code_quadruple(
        &self,
        composite: &Tensor<T>,
        real: &Tensor<T>,
        fg_mask: &RegionMask,
    ) -> Result<(CodeQuadruple<T>, Tensor<T>)> {
        let harmonized = self.harmonize(composite, fg_mask)?;
        let background = fg_mask.complement();
        let q = CodeQuadruple::new(
            self.extract_code(composite, fg_mask)?,
            self.extract_code(composite, &background)?,
            self.extract_code(real, fg_mask)?,
            self.extract_code(&harmonized, fg_mask)?,
        )?;
        Ok((q, harmonized))
    }
}

//! The prior-conditioned autoencoder: image encoder, prior encoder, merger,
//! volume decoder and the ground-truth volume encoder, plus the no-prior
//! variant that replaces the prior branch with pooled image features.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::Snapshot;
use crate::nn::{LayerSpec, ParamGroup, ParamStore, Real, Sequential, Tensor, Trace};
use crate::voxel::VoxelGrid;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub latent: usize,
    /// Output channels of the strided 2D blocks; the image side shrinks by 2 per block.
    pub image_channels: Vec<usize>,
    /// Output channels of the strided 3D blocks shared by the prior and ground-truth encoders.
    pub volume_channels: Vec<usize>,
    pub merger_hidden: usize,
    /// Input channels of the transposed 3D blocks; the last block emits one channel.
    pub decoder_channels: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            latent: 128,
            image_channels: vec![8, 16, 32, 32],
            volume_channels: vec![8, 16, 32],
            merger_hidden: 128,
            decoder_channels: vec![32, 16, 8],
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Prior,
    NoPrior,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Prior => "prior",
            Variant::NoPrior => "no_prior",
        }
    }
}

/// Resolutions a network is built for.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Geometry {
    pub dim: usize,
    pub image_size: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentTag {
    Image,
    Prior,
    Merged,
    GroundTruth,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LatentVec {
    pub tag: LatentTag,
    pub values: Vec<f32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ForwardTrace {
    pub e_i: LatentVec,
    pub e_p: LatentVec,
    pub e_z: LatentVec,
    pub prediction: VoxelGrid,
}

fn conv_stack(
    channels: &[usize],
    in_ch: usize,
    three_d: bool,
) -> Vec<LayerSpec> {
    let mut specs = Vec::new();
    let mut c = in_ch;
    for &out in channels {
        specs.push(if three_d {
            LayerSpec::Conv3d {
                in_ch: c,
                out_ch: out,
                kernel: 4,
                stride: 2,
                padding: 1,
            }
        } else {
            LayerSpec::Conv2d {
                in_ch: c,
                out_ch: out,
                kernel: 4,
                stride: 2,
                padding: 1,
            }
        });
        specs.push(LayerSpec::Relu);
        c = out;
    }
    specs
}

fn volume_encoder(cfg: &ModelConfig, dim: usize) -> Vec<LayerSpec> {
    let mut specs = conv_stack(&cfg.volume_channels, 1, true);
    let side = dim >> cfg.volume_channels.len();
    let flat = cfg.volume_channels.last().copied().unwrap_or(1) * side * side * side;
    specs.push(LayerSpec::Reshape(vec![flat]));
    specs.push(LayerSpec::Dense {
        inputs: flat,
        outputs: cfg.latent,
    });
    specs
}

fn decoder(cfg: &ModelConfig, dim: usize) -> Vec<LayerSpec> {
    let ch = &cfg.decoder_channels;
    let base = dim >> ch.len();
    let mut specs = vec![
        LayerSpec::Dense {
            inputs: cfg.latent,
            outputs: ch[0] * base * base * base,
        },
        LayerSpec::Relu,
        LayerSpec::Reshape(vec![ch[0], base, base, base]),
    ];
    for (i, &c) in ch.iter().enumerate() {
        let out = ch.get(i + 1).copied().unwrap_or(1);
        specs.push(LayerSpec::ConvTranspose3d {
            in_ch: c,
            out_ch: out,
            kernel: 4,
            stride: 2,
            padding: 1,
        });
        specs.push(if i + 1 == ch.len() {
            LayerSpec::Sigmoid
        } else {
            LayerSpec::Relu
        });
    }
    specs
}

fn validate(cfg: &ModelConfig, geo: Geometry) -> Result<()> {
    let bad = |m: String| Err(Error::Config(m));
    if cfg.latent == 0 || cfg.merger_hidden == 0 {
        return bad("model.latent and model.merger_hidden must be positive".into());
    }
    if cfg.image_channels.is_empty() || cfg.volume_channels.is_empty() || cfg.decoder_channels.is_empty() {
        return bad("model channel lists must be non-empty".into());
    }
    let fits = |size: usize, blocks: usize| size % (1 << blocks) == 0 && size >> blocks > 0;
    if !fits(geo.image_size, cfg.image_channels.len()) {
        return bad(format!(
            "image size {} not divisible by 2^{}",
            geo.image_size,
            cfg.image_channels.len()
        ));
    }
    for blocks in [cfg.volume_channels.len(), cfg.decoder_channels.len()] {
        if !fits(geo.dim, blocks) {
            return bad(format!("voxel dim {} not divisible by 2^{blocks}", geo.dim));
        }
    }
    Ok(())
}

/// Saved activations of one encoder pass.
#[derive(Clone, Debug)]
pub struct EncodeTrace<T> {
    img_conv: Trace<T>,
    img_head: Trace<T>,
    side: Trace<T>,
    merger: Trace<T>,
}

impl<T: Real> EncodeTrace<T> {
    pub fn e_i(&self) -> &Tensor<T> {
        self.img_head.output()
    }

    pub fn e_p(&self) -> &Tensor<T> {
        self.side.output()
    }

    pub fn e_z(&self) -> &Tensor<T> {
        self.merger.output()
    }
}

#[derive(Clone, Debug)]
pub struct PadMixNet {
    cfg: ModelConfig,
    variant: Variant,
    geo: Geometry,
    img_conv: Sequential,
    img_head: Sequential,
    /// Prior encoder, or the pooling head of the no-prior variant.
    side: Sequential,
    merger: Sequential,
    decoder: Sequential,
    gt_enc: Sequential,
}

impl PadMixNet {
    pub fn build<R: Rng + ?Sized>(
        cfg: &ModelConfig,
        variant: Variant,
        geo: Geometry,
        rng: &mut R,
    ) -> Result<(Self, ParamStore<f32>)> {
        validate(cfg, geo)?;
        let mut store = ParamStore::new();
        let net = &mut store;
        let l = cfg.latent;
        let img_conv = Sequential::build(
            "e_i",
            conv_stack(&cfg.image_channels, 2, false),
            ParamGroup::Network,
            net,
            rng,
        )?;
        let feat = img_conv.output_shape(&[2, geo.image_size, geo.image_size])?;
        let flat: usize = feat.iter().product();
        let img_head = Sequential::build(
            "e_i_head",
            vec![
                LayerSpec::Reshape(vec![flat]),
                LayerSpec::Dense {
                    inputs: flat,
                    outputs: l,
                },
            ],
            ParamGroup::Network,
            net,
            rng,
        )?;
        let side = match variant {
            Variant::Prior => Sequential::build(
                "e_p",
                volume_encoder(cfg, geo.dim),
                ParamGroup::Network,
                net,
                rng,
            )?,
            Variant::NoPrior => Sequential::build(
                "pool",
                vec![
                    LayerSpec::GlobalAvgPool,
                    LayerSpec::Dense {
                        inputs: feat[0],
                        outputs: l,
                    },
                ],
                ParamGroup::Network,
                net,
                rng,
            )?,
        };
        let merger = Sequential::build(
            "m",
            vec![
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: 2 * l,
                    outputs: cfg.merger_hidden,
                },
                LayerSpec::Relu,
                LayerSpec::Dense {
                    inputs: cfg.merger_hidden,
                    outputs: l,
                },
            ],
            ParamGroup::Network,
            net,
            rng,
        )?;
        let decoder = Sequential::build("d", decoder(cfg, geo.dim), ParamGroup::Network, net, rng)?;
        let gt_enc = Sequential::build(
            "e_gt",
            volume_encoder(cfg, geo.dim),
            ParamGroup::GroundTruth,
            net,
            rng,
        )?;
        Ok((
            PadMixNet {
                cfg: cfg.clone(),
                variant,
                geo,
                img_conv,
                img_head,
                side,
                merger,
                decoder,
                gt_enc,
            },
            store,
        ))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn geometry(&self) -> Geometry {
        self.geo
    }

    pub fn latent(&self) -> usize {
        self.cfg.latent
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [2, self.geo.image_size, self.geo.image_size]
    }

    pub fn volume_shape(&self) -> [usize; 4] {
        let d = self.geo.dim;
        [1, d, d, d]
    }

    fn check_shape<T: Real>(what: &str, t: &Tensor<T>, want: &[usize]) -> Result<()> {
        if t.shape() != want {
            return Err(Error::DimMismatch(format!(
                "{what} has shape {:?}, expected {want:?}",
                t.shape()
            )));
        }
        Ok(())
    }

    /// Runs E_I, the prior branch and M. `prior` must be given exactly when
    /// the network is the prior variant.
    pub fn encode<T: Real>(
        &self,
        store: &ParamStore<T>,
        image: &Tensor<T>,
        prior: Option<&Tensor<T>>,
    ) -> Result<EncodeTrace<T>> {
        Self::check_shape("image", image, &self.image_shape())?;
        let img_conv = self.img_conv.forward_trace(store, image.clone())?;
        let img_head = self.img_head.forward_trace(store, img_conv.output().clone())?;
        let side = match (self.variant, prior) {
            (Variant::Prior, Some(p)) => {
                Self::check_shape("prior", p, &self.volume_shape())?;
                self.side.forward_trace(store, p.clone())?
            }
            (Variant::NoPrior, None) => self.side.forward_trace(store, img_conv.output().clone())?,
            (Variant::Prior, None) => {
                return Err(Error::Invalid("prior variant needs a prior grid".into()))
            }
            (Variant::NoPrior, Some(_)) => {
                return Err(Error::Invalid("no-prior variant takes no prior grid".into()))
            }
        };
        let l = self.cfg.latent;
        let mut cat = Vec::with_capacity(2 * l);
        cat.extend_from_slice(img_head.output().data());
        cat.extend_from_slice(side.output().data());
        let merger = self.merger.forward_trace(store, Tensor::from_vec(&[2 * l], cat)?)?;
        Ok(EncodeTrace {
            img_conv,
            img_head,
            side,
            merger,
        })
    }

    pub fn decode<T: Real>(&self, store: &ParamStore<T>, e_z: &Tensor<T>) -> Result<Trace<T>> {
        Self::check_shape("latent", e_z, &[self.cfg.latent])?;
        self.decoder.forward_trace(store, e_z.clone())
    }

    pub fn encode_gt_trace<T: Real>(&self, store: &ParamStore<T>, volume: &Tensor<T>) -> Result<Trace<T>> {
        Self::check_shape("volume", volume, &self.volume_shape())?;
        self.gt_enc.forward_trace(store, volume.clone())
    }

    /// Gradient of the prediction back to `e_Z`; decoder gradients accumulate.
    pub fn backward_decoder<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        trace: &Trace<T>,
        grad_prediction: Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.decoder.backward(store, trace, grad_prediction)
    }

    /// Back-propagates a gradient on `e_Z` through M and both encoder
    /// branches. Returns the gradients on the image and (prior variant) prior.
    pub fn backward_encoder<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        trace: &EncodeTrace<T>,
        grad_e_z: Tensor<T>,
    ) -> Result<(Tensor<T>, Option<Tensor<T>>)> {
        let l = self.cfg.latent;
        let g_cat = self.merger.backward(store, &trace.merger, grad_e_z)?;
        let (gi, gp) = g_cat.data().split_at(l);
        let g_ei = Tensor::from_vec(&[l], gi.to_vec())?;
        let g_ep = Tensor::from_vec(&[l], gp.to_vec())?;
        let mut g_feat = self.img_head.backward(store, &trace.img_head, g_ei)?;
        let g_side = self.side.backward(store, &trace.side, g_ep)?;
        let g_prior = match self.variant {
            Variant::Prior => Some(g_side),
            Variant::NoPrior => {
                g_feat.add_assign(&g_side);
                None
            }
        };
        let g_image = self.img_conv.backward(store, &trace.img_conv, g_feat)?;
        Ok((g_image, g_prior))
    }

    pub fn backward_gt<T: Real>(
        &self,
        store: &mut ParamStore<T>,
        trace: &Trace<T>,
        grad_e_l: Tensor<T>,
    ) -> Result<Tensor<T>> {
        self.gt_enc.backward(store, trace, grad_e_l)
    }

    /// Image and prior to prediction, with all intermediate embeddings.
    pub fn forward(
        &self,
        store: &ParamStore<f32>,
        image: &[f32],
        prior: Option<&VoxelGrid>,
    ) -> Result<ForwardTrace> {
        let image = Tensor::from_vec(&self.image_shape(), image.to_vec())
            .map_err(|_| Error::DimMismatch(format!("image must hold {:?} values", self.image_shape())))?;
        let prior = prior.map(|p| self.grid_tensor(p)).transpose()?;
        let enc = self.encode(store, &image, prior.as_ref())?;
        let dec = self.decode(store, enc.e_z())?;
        let tag = |tag, t: &Tensor<f32>| LatentVec {
            tag,
            values: t.data().to_vec(),
        };
        Ok(ForwardTrace {
            e_i: tag(LatentTag::Image, enc.e_i()),
            e_p: tag(LatentTag::Prior, enc.e_p()),
            e_z: tag(LatentTag::Merged, enc.e_z()),
            prediction: VoxelGrid::from_values(self.geo.dim, dec.output().data().to_vec())?,
        })
    }

    /// Forward pass of the no-prior variant.
    pub fn forward_no_prior(&self, store: &ParamStore<f32>, image: &[f32]) -> Result<ForwardTrace> {
        if self.variant != Variant::NoPrior {
            return Err(Error::Invalid("forward_no_prior called on a prior-variant network".into()));
        }
        self.forward(store, image, None)
    }

    pub fn encode_gt(&self, store: &ParamStore<f32>, volume: &VoxelGrid) -> Result<LatentVec> {
        let t = self.encode_gt_trace(store, &self.grid_tensor(volume)?)?;
        Ok(LatentVec {
            tag: LatentTag::GroundTruth,
            values: t.output().data().to_vec(),
        })
    }

    pub fn grid_tensor<T: Real>(&self, grid: &VoxelGrid) -> Result<Tensor<T>> {
        if grid.dim() != self.geo.dim {
            return Err(Error::DimMismatch(format!(
                "grid dim {} but network built for {}",
                grid.dim(),
                self.geo.dim
            )));
        }
        Tensor::from_vec(
            &self.volume_shape(),
            grid.values().iter().map(|&v| T::from_f64(v as f64)).collect(),
        )
    }

    pub fn snapshot_meta(&self) -> BTreeMap<String, String> {
        let mut m = BTreeMap::new();
        m.insert("variant".into(), self.variant.name().into());
        m.insert("dim".into(), self.geo.dim.to_string());
        m.insert("image_size".into(), self.geo.image_size.to_string());
        m.insert(
            "model".into(),
            serde_json::to_string(&self.cfg).expect("model config serializes"),
        );
        m
    }

    /// Rebuilds the network described by a checkpoint and checks that the
    /// stored tensors match it name for name and shape for shape.
    pub fn from_snapshot(snap: &Snapshot) -> Result<(Self, ParamStore<f32>)> {
        let get = |k: &str| {
            snap.meta
                .get(k)
                .ok_or_else(|| Error::Checkpoint(format!("missing meta key '{k}'")))
        };
        let variant = match get("variant")?.as_str() {
            "prior" => Variant::Prior,
            "no_prior" => Variant::NoPrior,
            v => return Err(Error::Checkpoint(format!("unknown variant '{v}'"))),
        };
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad meta value for '{k}'")))
        };
        let geo = Geometry {
            dim: num("dim")?,
            image_size: num("image_size")?,
        };
        let cfg: ModelConfig = serde_json::from_str(get("model")?)?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let (net, fresh) = PadMixNet::build(&cfg, variant, geo, &mut rng)?;
        if fresh.len() != snap.store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, network has {}",
                snap.store.len(),
                fresh.len()
            )));
        }
        for (a, b) in fresh.iter().zip(snap.store.iter()) {
            if a.name != b.name || a.value.shape() != b.value.shape() || a.group != b.group {
                return Err(Error::Checkpoint(format!(
                    "tensor {} does not match network layout",
                    b.name
                )));
            }
        }
        Ok((net, snap.store.clone()))
    }
}

/// Volume autoencoder used to pretrain E_GT. The encoder carries the same
/// parameter names as the network's E_GT so its weights copy over directly.
#[derive(Clone, Debug)]
pub struct GtAutoencoder {
    pub encoder: Sequential,
    pub decoder: Sequential,
    dim: usize,
}

impl GtAutoencoder {
    pub fn build<R: Rng + ?Sized>(cfg: &ModelConfig, dim: usize, rng: &mut R) -> Result<(Self, ParamStore<f32>)> {
        validate(cfg, Geometry { dim, image_size: 1 << cfg.image_channels.len() })?;
        let mut store = ParamStore::new();
        let encoder = Sequential::build("e_gt", volume_encoder(cfg, dim), ParamGroup::GroundTruth, &mut store, rng)?;
        let decoder = Sequential::build("gt_dec", decoder(cfg, dim), ParamGroup::GroundTruth, &mut store, rng)?;
        Ok((GtAutoencoder { encoder, decoder, dim }, store))
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn reconstruct(&self, store: &ParamStore<f32>, volume: &VoxelGrid) -> Result<VoxelGrid> {
        let d = self.dim;
        let x = Tensor::from_vec(&[1, d, d, d], volume.values().to_vec())?;
        let z = self.encoder.forward(store, &x)?;
        VoxelGrid::from_values(d, self.decoder.forward(store, &z)?.into_vec())
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::losses::cosine;

    fn tiny() -> ModelConfig {
        ModelConfig {
            latent: 8,
            image_channels: vec![2, 3],
            volume_channels: vec![2],
            merger_hidden: 6,
            decoder_channels: vec![3],
        }
    }

    fn random_grid(dim: usize, rng: &mut ChaCha8Rng) -> VoxelGrid {
        let occ: Vec<bool> = (0..dim * dim * dim).map(|_| rng.random_bool(0.4)).collect();
        VoxelGrid::from_occupancy(dim, &occ).unwrap()
    }

    #[test]
    fn forward_contract_and_purity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let geo = Geometry { dim: 16, image_size: 32 };
        let (net, store) = PadMixNet::build(&ModelConfig::default(), Variant::Prior, geo, &mut rng).unwrap();
        let image: Vec<f32> = (0..2 * 32 * 32).map(|_| rng.random()).collect();
        let prior = random_grid(16, &mut rng);
        let a = net.forward(&store, &image, Some(&prior)).unwrap();
        let b = net.forward(&store, &image, Some(&prior)).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.prediction.len(), 16 * 16 * 16);
        assert!(a.prediction.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.e_z.values.len(), 128);
        assert_eq!(a.e_i.values.len(), a.e_p.values.len());
        assert!(net.forward(&store, &image[1..], Some(&prior)).is_err());
        assert!(net.forward(&store, &image, Some(&VoxelGrid::empty(8))).is_err());
    }

    #[test]
    fn prior_changes_merged_embedding() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let geo = Geometry { dim: 8, image_size: 8 };
        let (net, store) = PadMixNet::build(&tiny(), Variant::Prior, geo, &mut rng).unwrap();
        let image: Vec<f32> = (0..2 * 64).map(|_| rng.random()).collect();
        let prior = random_grid(8, &mut rng);
        let base = net.forward(&store, &image, Some(&prior)).unwrap();
        let mut sens = 0.0f64;
        for i in (0..512).step_by(37) {
            let mut v = prior.values().to_vec();
            v[i] = if v[i] == 1.0 { 0.9 } else { 0.1 };
            let p = VoxelGrid::from_values(8, v).unwrap();
            let t = net.forward(&store, &image, Some(&p)).unwrap();
            sens += t
                .e_z
                .values
                .iter()
                .zip(&base.e_z.values)
                .map(|(a, b)| (a - b).abs() as f64)
                .sum::<f64>();
        }
        assert!(sens > 0.0);
        let other = random_grid(8, &mut rng);
        let c = net.forward(&store, &image, Some(&other)).unwrap();
        assert_ne!(c.e_z, base.e_z);
    }

    #[test]
    fn encode_gt_is_deterministic_and_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let geo = Geometry { dim: 16, image_size: 32 };
        let (net, store) = PadMixNet::build(&ModelConfig::default(), Variant::Prior, geo, &mut rng).unwrap();
        let (a, b) = (random_grid(16, &mut rng), random_grid(16, &mut rng));
        let ea = net.encode_gt(&store, &a).unwrap();
        assert_eq!(ea, net.encode_gt(&store, &a).unwrap());
        let eb = net.encode_gt(&store, &b).unwrap();
        assert!(cosine(&ea.values, &eb.values).unwrap() < 1.0);
        assert!(store.iter().filter(|p| p.name.starts_with("e_gt.")).all(|p| p.group == ParamGroup::GroundTruth));
    }

    #[test]
    fn no_prior_variant_structure() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let geo = Geometry { dim: 16, image_size: 32 };
        let (net, store) = PadMixNet::build(&ModelConfig::default(), Variant::NoPrior, geo, &mut rng).unwrap();
        assert!(store.iter().all(|p| !p.name.starts_with("e_p.")));
        let image: Vec<f32> = (0..2 * 32 * 32).map(|_| rng.random()).collect();
        let t = net.forward_no_prior(&store, &image).unwrap();
        assert!(t.prediction.values().iter().all(|&v| v > 0.0 && v < 1.0));
        assert!(net.forward(&store, &image, Some(&VoxelGrid::empty(16))).is_err());

        let (pnet, pstore) = PadMixNet::build(&ModelConfig::default(), Variant::Prior, geo, &mut rng).unwrap();
        assert!(pnet.forward_no_prior(&pstore, &image).is_err());
    }

    #[test]
    fn snapshot_round_trip_rebuilds_network() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let geo = Geometry { dim: 8, image_size: 8 };
        let (net, store) = PadMixNet::build(&tiny(), Variant::NoPrior, geo, &mut rng).unwrap();
        let snap = Snapshot {
            meta: net.snapshot_meta(),
            store: store.clone(),
            with_moments: false,
        };
        let (net2, store2) = PadMixNet::from_snapshot(&snap).unwrap();
        assert_eq!(net2.variant(), Variant::NoPrior);
        assert_eq!(store2, store);
        let mut bad = snap.clone();
        bad.meta.insert("dim".into(), "16".into());
        assert!(PadMixNet::from_snapshot(&bad).is_err());
    }
}

//! Alternating adversarial training of the style-removal network and the
//! discriminator, checkpointing, and inference.

mod checkpoint;
mod optim;

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use checkpoint::{Checkpoint, CheckpointHeader, RngState, TensorEntry, FORMAT_VERSION, MAGIC};
pub use optim::RmsProp;

use crate::autograd::{Tape, Var};
use crate::dataset::{center_crop_resize, DatasetManifest, Split};
use crate::error::{Error, Result};
use crate::image::{from_network_batch, to_network_batch, ImageTensor};
use crate::losses::{
    discriminator_loss, generator_adversarial_loss, identity_loss, pixel_loss, srn_total_loss, ExtractorSpec,
    FeatureExtractor, LossWeights,
};
use crate::networks::{Dn, DnConfig, Srn, SrnConfig};
use crate::nn::{Binding, Mode, ParamId, ParamStore};
use crate::stn::StnSite;
use crate::tensor::Tensor;

pub const METRICS_HEADER: &str = "step,epoch,L_pix,L_dis,L_id,L_SNR,lambda_n,eta_n";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    /// RMSprop smoothing complement: squared gradients are averaged with
    /// coefficient `1 - optimizer_decay`.
    pub optimizer_decay: f64,
    pub rms_eps: f64,
    pub epochs: u64,
    /// Stops after this many steps even mid-epoch.
    pub max_steps: Option<u64>,
    pub seed: u64,
    pub image_size: usize,
    pub base_channels: usize,
    pub depth: usize,
    pub stn_sites: Vec<StnSite>,
    pub loss_weights: LossWeights,
    pub extractor: ExtractorSpec,
    /// Write a checkpoint every this many epochs; 0 writes only the final one.
    pub checkpoint_every: u64,
    /// Train only on these styles; empty means every style in the manifest.
    pub styles: Vec<String>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer_decay: 1e-2,
            rms_eps: 1e-8,
            epochs: 10,
            max_steps: None,
            seed: 0,
            image_size: 32,
            base_channels: 8,
            depth: 5,
            stn_sites: StnSite::ALL.to_vec(),
            loss_weights: LossWeights::default(),
            extractor: ExtractorSpec::default(),
            checkpoint_every: 0,
            styles: Vec::new(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(self.optimizer_decay > 0.0 && self.optimizer_decay <= 1.0) {
            return Err(Error::Config("optimizer_decay must be in (0, 1]".into()));
        }
        self.loss_weights.validate()?;
        self.srn_config().validate()?;
        DnConfig::matching(&self.srn_config()).conv_layers()?;
        Ok(())
    }

    pub fn srn_config(&self) -> SrnConfig {
        SrnConfig {
            image_size: self.image_size,
            base_channels: self.base_channels,
            depth: self.depth,
            stn_sites: self.stn_sites.clone(),
            ..SrnConfig::default()
        }
    }

    /// Reads JSON, or TOML when the file extension is `.toml`.
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
        let cfg: TrainConfig = if path.extension().is_some_and(|e| e == "toml") {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        Ok(cfg)
    }

    /// SHA-256 of the configuration with the run-length fields (`epochs`,
    /// `max_steps`, `checkpoint_every`) cleared, so a run can be resumed
    /// and extended.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.epochs = 0;
        c.max_steps = None;
        c.checkpoint_every = 0;
        let json = serde_json::to_vec(&c).expect("config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: u64,
    pub epoch: u64,
    pub l_pix: f64,
    pub l_dis: f64,
    pub l_id: f64,
    pub l_snr: f64,
    pub lambda_n: f64,
    pub eta_n: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.step, self.epoch, self.l_pix, self.l_dis, self.l_id, self.l_snr, self.lambda_n, self.eta_n
        )
    }

    fn all_finite(&self) -> bool {
        [self.l_pix, self.l_dis, self.l_id, self.l_snr].iter().all(|v| v.is_finite())
    }
}

/// Everything that changes during training.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub srn: Srn,
    pub dn: Dn,
    pub opt_g: RmsProp,
    pub opt_d: RmsProp,
    /// Completed epochs; indexes the loss-weight schedules.
    pub epoch: u64,
    /// Completed steps.
    pub step: u64,
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let srn = Srn::build(config.srn_config(), config.seed)?;
        let dn = Dn::build(DnConfig::matching(&srn.config), config.seed.wrapping_add(1))?;
        let alpha = 1.0 - config.optimizer_decay;
        let opt_g = RmsProp::new(&srn.params, config.learning_rate, alpha, config.rms_eps);
        let opt_d = RmsProp::new(&dn.params, config.learning_rate, alpha, config.rms_eps);
        Ok(TrainState {
            config,
            srn,
            dn,
            opt_g,
            opt_d,
            epoch: 0,
            step: 0,
        })
    }

    pub fn lambda(&self) -> f64 {
        self.config.loss_weights.lambda(self.epoch)
    }

    pub fn eta(&self) -> f64 {
        self.config.loss_weights.eta(self.epoch)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        fn named(store: &ParamStore, opt: Option<&RmsProp>) -> BTreeMap<String, Tensor> {
            match opt {
                None => store.to_map(),
                Some(o) => store
                    .iter()
                    .zip(&o.square_avg)
                    .map(|((n, _), v)| (n.to_string(), v.clone()))
                    .collect(),
            }
        }
        let mut groups = BTreeMap::new();
        groups.insert("srn".to_string(), named(&self.srn.params, None));
        groups.insert("srn_bn".to_string(), named(&self.srn.buffers, None));
        groups.insert("dn".to_string(), named(&self.dn.params, None));
        groups.insert("dn_bn".to_string(), named(&self.dn.buffers, None));
        groups.insert("opt_g".to_string(), named(&self.srn.params, Some(&self.opt_g)));
        groups.insert("opt_d".to_string(), named(&self.dn.params, Some(&self.opt_d)));
        Checkpoint {
            header: CheckpointHeader {
                format_version: FORMAT_VERSION,
                config: self.config.clone(),
                config_hash: self.config.hash(),
                epoch: self.epoch,
                step: self.step,
                srn: self.srn.config.clone(),
                dn: self.dn.config.clone(),
                rng: RngState {
                    seed: self.config.seed,
                    epoch: self.epoch,
                },
                tensors: Vec::new(),
            },
            groups,
        }
    }

    pub fn from_checkpoint(ckpt: &Checkpoint) -> Result<Self> {
        let h = &ckpt.header;
        if h.config.hash() != h.config_hash {
            return Err(Error::Checkpoint("config hash does not match the stored config".into()));
        }
        let mut state = TrainState::new(h.config.clone())?;
        if state.srn.config != h.srn || state.dn.config != h.dn {
            return Err(Error::Checkpoint("network configuration does not match the training config".into()));
        }
        state.srn.params.load_from(ckpt.group("srn"))?;
        state.srn.buffers.load_from(ckpt.group("srn_bn"))?;
        state.dn.params.load_from(ckpt.group("dn"))?;
        state.dn.buffers.load_from(ckpt.group("dn_bn"))?;
        load_square_avg(&mut state.opt_g, &state.srn.params, ckpt.group("opt_g"))?;
        load_square_avg(&mut state.opt_d, &state.dn.params, ckpt.group("opt_d"))?;
        state.epoch = h.epoch;
        state.step = h.step;
        Ok(state)
    }
}

fn load_square_avg(opt: &mut RmsProp, store: &ParamStore, src: &BTreeMap<String, Tensor>) -> Result<()> {
    let mut tmp = store.clone();
    tmp.load_from(src)?;
    opt.square_avg = tmp.iter().map(|(_, t)| t.clone()).collect();
    Ok(())
}

/// Builds only the generator from a checkpoint, for inference.
pub fn srn_from_checkpoint(ckpt: &Checkpoint) -> Result<Srn> {
    let mut srn = Srn::build(ckpt.header.srn.clone(), 0)?;
    srn.params.load_from(ckpt.group("srn"))?;
    srn.buffers.load_from(ckpt.group("srn_bn"))?;
    Ok(srn)
}

/// All four losses on one tape, with gradients able to reach both
/// networks (the fake batch is not detached from the discriminator loss).
pub struct LossGraph {
    pub tape: Tape,
    pub pix: Var,
    pub id: Var,
    pub dis: Var,
    pub adv: Var,
    pub total: Var,
    pub g_params: Vec<(ParamId, Var)>,
    pub d_params: Vec<(ParamId, Var)>,
}

pub fn build_loss_graph(
    srn: &Srn,
    dn: &Dn,
    psi: &dyn FeatureExtractor,
    sf: &Tensor,
    rf: &Tensor,
    lambda: f64,
    eta: f64,
) -> Result<LossGraph> {
    let mut tape = Tape::new();
    let mut bg = Binding::new(&srn.params, &srn.buffers, true, Mode::Train);
    let mut bd = Binding::new(&dn.params, &dn.buffers, true, Mode::Train);
    let x = tape.constant(sf.clone());
    let real = tape.constant(rf.clone());
    let fake = srn.forward(&mut tape, &mut bg, x)?;
    let d_real = dn.forward(&mut tape, &mut bd, real)?;
    let d_fake = dn.forward(&mut tape, &mut bd, fake)?;
    let dis = discriminator_loss(&mut tape, d_real, d_fake);
    let adv = generator_adversarial_loss(&mut tape, d_fake);
    let pix = pixel_loss(&mut tape, fake, real)?;
    let id = identity_loss(&mut tape, psi, fake, rf)?;
    let total = srn_total_loss(&mut tape, pix, adv, id, lambda, eta);
    let g_params = bg.bound().collect();
    let d_params = bd.bound().collect();
    Ok(LossGraph {
        tape,
        pix,
        id,
        dis,
        adv,
        total,
        g_params,
        d_params,
    })
}

/// One discriminator update followed by one generator update.
pub fn train_step(state: &mut TrainState, psi: &dyn FeatureExtractor, sf: &Tensor, rf: &Tensor) -> Result<StepMetrics> {
    state.srn.check_input(sf.shape())?;
    if sf.shape() != rf.shape() {
        return Err(Error::Shape(format!("sf {:?} vs rf {:?}", sf.shape(), rf.shape())));
    }
    let (lambda, eta) = (state.lambda(), state.eta());

    let mut tape_g = Tape::new();
    let mut bg = Binding::new(&state.srn.params, &state.srn.buffers, true, Mode::Train);
    let x = tape_g.constant(sf.clone());
    let fake = state.srn.forward(&mut tape_g, &mut bg, x)?;

    // Discriminator step on a detached copy of the generated batch.
    let (l_dis, d_grads, d_bn) = {
        let mut tape_d = Tape::new();
        let mut bd = Binding::new(&state.dn.params, &state.dn.buffers, true, Mode::Train);
        let real = tape_d.constant(rf.clone());
        let fake_c = tape_d.constant(tape_g.value(fake).clone());
        let d_real = state.dn.forward(&mut tape_d, &mut bd, real)?;
        let d_fake = state.dn.forward(&mut tape_d, &mut bd, fake_c)?;
        let loss = discriminator_loss(&mut tape_d, d_real, d_fake);
        let mut grads = tape_d.backward(loss);
        let pairs: Vec<(ParamId, Tensor)> = bd
            .bound()
            .map(|(id, v)| (id, grads.take(v).unwrap_or_else(|| Tensor::zeros(tape_d.shape(v)))))
            .collect();
        (tape_d.value(loss).item(), pairs, bd.into_bn_updates())
    };
    if !l_dis.is_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("L_dis = {l_dis}"),
        });
    }
    state.opt_d.step(&mut state.dn.params, &d_grads);
    state.dn.apply_bn_updates(&d_bn);

    // Generator step against the updated discriminator.
    let mut bd = Binding::new(&state.dn.params, &state.dn.buffers, false, Mode::Train);
    let real = tape_g.constant(rf.clone());
    let d_fake = state.dn.forward(&mut tape_g, &mut bd, fake)?;
    let adv = generator_adversarial_loss(&mut tape_g, d_fake);
    let pix = pixel_loss(&mut tape_g, fake, real)?;
    let id = identity_loss(&mut tape_g, psi, fake, rf)?;
    let total = srn_total_loss(&mut tape_g, pix, adv, id, lambda, eta);

    let metrics = StepMetrics {
        step: state.step,
        epoch: state.epoch,
        l_pix: tape_g.value(pix).item(),
        l_dis,
        l_id: tape_g.value(id).item(),
        l_snr: tape_g.value(total).item(),
        lambda_n: lambda,
        eta_n: eta,
    };
    if !metrics.all_finite() {
        return Err(Error::NonFinite {
            step: state.step,
            detail: format!("{metrics:?}"),
        });
    }
    let mut grads = tape_g.backward(total);
    let g_grads: Vec<(ParamId, Tensor)> = bg
        .bound()
        .map(|(id, v)| (id, grads.take(v).unwrap_or_else(|| Tensor::zeros(tape_g.shape(v)))))
        .collect();
    let g_bn = bg.into_bn_updates();
    state.opt_g.step(&mut state.srn.params, &g_grads);
    state.srn.apply_bn_updates(&g_bn);
    state.step += 1;
    Ok(metrics)
}

/// Preloaded training tensors in `[-1, 1]`.
#[derive(Clone, Debug)]
pub struct PairSet {
    pub sf: Vec<Tensor>,
    pub rf: Vec<Tensor>,
}

impl PairSet {
    pub fn len(&self) -> usize {
        self.sf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sf.is_empty()
    }

    pub fn from_images(pairs: &[(ImageTensor, ImageTensor)], image_size: usize) -> Result<Self> {
        let mut sf = Vec::with_capacity(pairs.len());
        let mut rf = Vec::with_capacity(pairs.len());
        for (s, r) in pairs {
            sf.push(to_network_batch(&[fit(s, image_size)?])?);
            rf.push(to_network_batch(&[fit(r, image_size)?])?);
        }
        Ok(PairSet { sf, rf })
    }

    /// Train-split pairs of `manifest`, restricted to `styles` when given.
    pub fn from_manifest(manifest: &DatasetManifest, styles: &[String], image_size: usize) -> Result<Self> {
        let pairs = manifest
            .split(Split::Train)
            .into_iter()
            .filter(|r| styles.is_empty() || styles.contains(&r.style))
            .map(|r| manifest.load_pair(r))
            .collect::<Result<Vec<_>>>()?;
        if pairs.is_empty() {
            return Err(Error::Empty("training split has no pairs".into()));
        }
        PairSet::from_images(&pairs, image_size)
    }

    fn batch(&self, idx: &[usize]) -> Result<(Tensor, Tensor)> {
        let sf: Vec<Tensor> = idx.iter().map(|&i| self.sf[i].clone()).collect();
        let rf: Vec<Tensor> = idx.iter().map(|&i| self.rf[i].clone()).collect();
        Ok((Tensor::stack(&sf)?, Tensor::stack(&rf)?))
    }
}

fn fit(img: &ImageTensor, size: usize) -> Result<ImageTensor> {
    if img.height() == size && img.width() == size {
        Ok(img.clone())
    } else {
        center_crop_resize(img, size)
    }
}

/// Batch order for an epoch: a seeded shuffle, cut into full batches (a
/// single short batch when there are fewer pairs than `batch_size`).
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0xA076_1D64_78BD_642F));
    order.shuffle(&mut rng);
    if n < batch_size {
        return vec![order];
    }
    order.chunks_exact(batch_size).map(<[usize]>::to_vec).collect()
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Directory for `metrics.csv` and checkpoints; nothing is written when
    /// `None`.
    pub out_dir: Option<PathBuf>,
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub metrics: Vec<StepMetrics>,
}

/// Runs epochs `state.epoch .. config.epochs` (or until `max_steps`).
///
/// Resuming from a checkpoint taken at an epoch boundary reproduces an
/// uninterrupted run exactly.
pub fn train(
    mut state: TrainState,
    data: &PairSet,
    psi: &dyn FeatureExtractor,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    if data.is_empty() {
        return Err(Error::Empty("training split has no pairs".into()));
    }
    let cfg = state.config.clone();
    let mut csv = match &opts.out_dir {
        Some(dir) => Some(open_metrics(dir, state.step > 0)?),
        None => None,
    };
    let mut metrics = Vec::new();
    let limit_hit = |s: &TrainState| cfg.max_steps.is_some_and(|m| s.step >= m);
    while state.epoch < cfg.epochs && !limit_hit(&state) {
        for idx in epoch_batches(data.len(), cfg.batch_size, cfg.seed, state.epoch) {
            if limit_hit(&state) {
                break;
            }
            let (sf, rf) = data.batch(&idx)?;
            let m = match train_step(&mut state, psi, &sf, &rf) {
                Ok(m) => m,
                Err(e @ Error::NonFinite { .. }) => {
                    if let Some(dir) = &opts.out_dir {
                        dump_diagnostics(dir, &state, &metrics, &e);
                    }
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            if let Some((w, path)) = &mut csv {
                writeln!(w, "{}", m.csv_row()).map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
            }
            log::debug!("{}", m.csv_row());
            metrics.push(m);
        }
        if limit_hit(&state) && !epoch_complete(&state, data.len()) {
            break;
        }
        state.epoch += 1;
        if let Some(dir) = &opts.out_dir {
            if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
                state.to_checkpoint().save(&dir.join(format!("epoch_{:04}.ckpt", state.epoch)))?;
            }
        }
    }
    if let Some((w, path)) = &mut csv {
        w.flush().map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    if let Some(dir) = &opts.out_dir {
        state.to_checkpoint().save(&dir.join("final.ckpt"))?;
    }
    Ok(TrainOutcome { state, metrics })
}

fn epoch_complete(state: &TrainState, n: usize) -> bool {
    let per_epoch = if n < state.config.batch_size { 1 } else { n / state.config.batch_size };
    state.step == (state.epoch + 1) * per_epoch as u64
}

fn open_metrics(dir: &Path, append: bool) -> Result<(std::io::BufWriter<std::fs::File>, PathBuf)> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("metrics.csv");
    let existing = append && path.exists();
    let file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(existing)
        .truncate(!existing)
        .open(&path)
        .map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut w = std::io::BufWriter::new(file);
    if !existing {
        writeln!(w, "{METRICS_HEADER}").map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    Ok((w, path))
}

fn dump_diagnostics(dir: &Path, state: &TrainState, metrics: &[StepMetrics], err: &Error) {
    let dump = serde_json::json!({
        "error": err.to_string(),
        "step": state.step,
        "epoch": state.epoch,
        "recent_metrics": metrics.iter().rev().take(20).collect::<Vec<_>>(),
        "non_finite_params": state
            .srn
            .params
            .iter()
            .chain(state.dn.params.iter())
            .filter(|(_, t)| !t.all_finite())
            .map(|(n, _)| n)
            .collect::<Vec<_>>(),
    });
    let path = dir.join("nan_dump.json");
    if let Err(e) = std::fs::write(&path, format!("{dump:#}\n")) {
        log::error!("could not write {}: {e}", path.display());
    }
    let _ = state.to_checkpoint().save(&dir.join("nan_state.ckpt"));
}

/// Inference-mode recovery; inputs of another size are centre-cropped and
/// resized first. Outputs are in `[0, 1]`.
pub fn recover(srn: &Srn, portraits: &[ImageTensor]) -> Result<Vec<ImageTensor>> {
    const CHUNK: usize = 16;
    let size = srn.config.image_size;
    let mut out = Vec::with_capacity(portraits.len());
    for chunk in portraits.chunks(CHUNK) {
        let fitted = chunk.iter().map(|p| fit(p, size)).collect::<Result<Vec<_>>>()?;
        let y = srn.infer(&to_network_batch(&fitted)?)?;
        out.extend(from_network_batch(&y)?);
    }
    Ok(out)
}

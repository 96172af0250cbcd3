//! Spatial-domain protect and recover.
//!
//! Protection runs the original and its obfuscated template through the
//! wavelet transform and the forward flow; the second output half becomes
//! the protected image and the first is a byproduct that callers should
//! normally drop. Recovery needs only the protected image and the password:
//! the missing half is replaced by the secret map repeated per colour
//! channel.
//!
//! The `*_graph` functions record the same computation on a tape for
//! batched training.

use crate::error::{Error, Result};
use crate::flow::{broadcast_batch, flow_backward, flow_forward, BoundFlow, FlowModel};
use crate::imageio::{Image, Role};
use crate::keygen::{self, SecretKey, SecretMap};
use crate::obfuscators::ObfuscatorSpec;
use crate::tensor::{Scalar, Tape, Tensor, Var};
use crate::wavelet;

/// What the protected image should look like.
#[derive(Clone, Copy, Debug)]
pub enum Template<'a> {
    Obfuscate(&'a ObfuscatorSpec),
    Image(&'a Image),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ProtectOutput {
    pub protected: Image,
    /// Carries the information the template lost. Sensitive.
    pub byproduct: Image,
    pub template: Image,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RecoverOutput {
    pub recovered: Image,
    pub byproduct: Image,
}

fn check_size(model: &FlowModel, img: &Image, what: &str) -> Result<()> {
    let side = model.config.side;
    if img.height() != side || img.width() != side {
        return Err(Error::shape(
            "pipeline",
            format!(
                "{what} is {}x{} but the model works on {side}x{side}",
                img.width(),
                img.height()
            ),
        ));
    }
    Ok(())
}

fn batch_of(img: &Image) -> Result<Tensor> {
    Tensor::stack(&[img.tensor()])
}

fn unbatch(t: &Tensor, role: Role) -> Result<Image> {
    Image::new(t.select(0)?, role)
}

pub fn secret_map(model: &FlowModel, key: &SecretKey) -> Result<SecretMap> {
    let side = model.config.side;
    keygen::keygen(key, side, side, &model.config.keygen)
}

pub fn protect(model: &FlowModel, x: &Image, template: Template<'_>, key: &SecretKey) -> Result<ProtectOutput> {
    check_size(model, x, "input")?;
    let y = match template {
        Template::Obfuscate(spec) => spec.apply(x)?,
        Template::Image(y) => {
            if !y.same_size(x) {
                return Err(Error::shape("protect", "template and input differ in size"));
            }
            y.clone().with_role(Role::PreObfuscated)
        }
    };
    let k = secret_map(model, key)?;
    let xf = wavelet::dwt(&batch_of(x)?)?;
    let yf = wavelet::dwt(&batch_of(&y)?)?;
    let (xo, yo) = model.forward(&xf, &yf, k.tensor())?;
    Ok(ProtectOutput {
        protected: unbatch(&wavelet::iwt(&yo)?, Role::Protected)?,
        byproduct: unbatch(&wavelet::iwt(&xo)?, Role::Byproduct)?,
        template: y,
    })
}

pub fn recover(model: &FlowModel, protected: &Image, key: &SecretKey) -> Result<RecoverOutput> {
    check_size(model, protected, "protected image")?;
    let k = secret_map(model, key)?;
    let latent = keygen::expand_for_recovery(&k);
    recover_from_latent(model, protected, &latent, &k)
}

/// Recovery with the true byproduct in place of the key expansion. For any
/// parameters this reproduces the original up to rounding.
pub fn recover_with_byproduct(
    model: &FlowModel,
    protected: &Image,
    byproduct: &Image,
    key: &SecretKey,
) -> Result<RecoverOutput> {
    check_size(model, protected, "protected image")?;
    check_size(model, byproduct, "byproduct")?;
    let k = secret_map(model, key)?;
    let latent = wavelet::dwt(&batch_of(byproduct)?)?;
    recover_from_latent(model, protected, &latent, &k)
}

fn recover_from_latent(model: &FlowModel, protected: &Image, latent: &Tensor, k: &SecretMap) -> Result<RecoverOutput> {
    let yf = wavelet::dwt(&batch_of(protected)?)?;
    let (xb, yb) = model.backward(latent, &yf, k.tensor())?;
    Ok(RecoverOutput {
        recovered: unbatch(&wavelet::iwt(&xb)?, Role::Recovered)?,
        byproduct: unbatch(&wavelet::iwt(&yb)?, Role::Byproduct)?,
    })
}

/// Records protection of a `(B, 3, H, W)` batch; `key` is `(1 or B, 4, H/2,
/// W/2)`. Returns `(protected, byproduct)`.
pub fn protect_graph<T: Scalar>(tape: &mut Tape<T>, flow: &BoundFlow, x: Var, y: Var, key: Var) -> Result<(Var, Var)> {
    let xf = tape.dwt(x)?;
    let yf = tape.dwt(y)?;
    let (xo, yo) = flow_forward(tape, flow, xf, yf, key)?;
    Ok((tape.iwt(yo)?, tape.iwt(xo)?))
}

/// Records recovery of a protected batch from the secret map `key` and its
/// 12-channel expansion `latent`. Returns `(recovered, byproduct)`.
pub fn recover_graph<T: Scalar>(
    tape: &mut Tape<T>,
    flow: &BoundFlow,
    protected: Var,
    key: Var,
    latent: Var,
) -> Result<(Var, Var)> {
    let yf = tape.dwt(protected)?;
    let (xb, yb) = flow_backward(tape, flow, latent, yf, key)?;
    Ok((tape.iwt(xb)?, tape.iwt(yb)?))
}

/// Secret maps for a batch of keys: `(K, K|K|K)` stacked along the batch.
pub fn key_batch<T: Scalar>(maps: &[SecretMap]) -> Result<(Tensor<T>, Tensor<T>)> {
    let k: Vec<Tensor> = maps.iter().map(|m| m.tensor().select(0)).collect::<Result<_>>()?;
    let kkk: Vec<Tensor> = maps
        .iter()
        .map(|m| keygen::expand_for_recovery(m).select(0))
        .collect::<Result<_>>()?;
    let k = Tensor::stack(&k.iter().collect::<Vec<_>>())?;
    let kkk = Tensor::stack(&kkk.iter().collect::<Vec<_>>())?;
    Ok((k.cast(), kkk.cast()))
}

/// Repeats one secret map across a batch.
pub fn broadcast_key<T: Scalar>(map: &SecretMap, batch: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let k = broadcast_batch(map.tensor(), batch)?;
    let kkk = broadcast_batch(&keygen::expand_for_recovery(map), batch)?;
    Ok((k.cast(), kkk.cast()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::FlowConfig;
    use crate::obfuscators::ObfuscatorKind;

    fn cfg(side: usize) -> FlowConfig {
        FlowConfig {
            blocks: 2,
            growth: 4,
            side,
            ..FlowConfig::default()
        }
    }

    fn face(side: usize) -> Image {
        Image::from_fn(side, side, Role::Original, |c, y, x| {
            (0.5 + 0.4 * ((x as f32 * 0.7 + c as f32).sin() * (y as f32 * 0.3).cos())).clamp(0.0, 1.0)
        })
    }

    fn key(s: &str) -> SecretKey {
        SecretKey::new(s).unwrap()
    }

    #[test]
    fn identity_at_init() {
        let model = FlowModel::init(cfg(16), 1).unwrap();
        let x = face(16);
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::Pixelate);
        let out = protect(&model, &x, Template::Obfuscate(&spec), &key("k")).unwrap();
        assert!(out.protected.tensor().max_abs_diff(out.template.tensor()).unwrap() < 1e-6);
        assert!(out.byproduct.tensor().max_abs_diff(x.tensor()).unwrap() < 1e-6);
        assert_eq!(out.protected.role(), Role::Protected);
        assert_eq!(out.template.role(), Role::PreObfuscated);
    }

    #[test]
    fn closure_with_true_byproduct() {
        let model = FlowModel::init_perturbed(cfg(16), 2, 0.05).unwrap();
        let x = face(16);
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::GaussianBlur);
        let out = protect(&model, &x, Template::Obfuscate(&spec), &key("pw")).unwrap();
        let back = recover_with_byproduct(&model, &out.protected, &out.byproduct, &key("pw")).unwrap();
        assert!(back.recovered.tensor().max_abs_diff(x.tensor()).unwrap() < 1e-3);
        assert!(back.byproduct.tensor().max_abs_diff(out.template.tensor()).unwrap() < 1e-3);
    }

    #[test]
    fn recover_deterministic_and_key_dependent() {
        let model = FlowModel::init_perturbed(cfg(16), 3, 0.05).unwrap();
        let x = face(16);
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::MedianBlur);
        let out = protect(&model, &x, Template::Obfuscate(&spec), &key("pw")).unwrap();
        let a = recover(&model, &out.protected, &key("pw")).unwrap();
        let b = recover(&model, &out.protected, &key("pw")).unwrap();
        assert_eq!(a, b);
        let c = recover(&model, &out.protected, &key("px")).unwrap();
        assert_ne!(a.recovered, c.recovered);
        let spoof = recover(&model, &out.template, &key("pw")).unwrap();
        assert_ne!(spoof.recovered, a.recovered);
    }

    #[test]
    fn graph_matches_direct() {
        let model = FlowModel::init_perturbed(cfg(8), 4, 0.05).unwrap();
        let x = face(8);
        let y = Image::filled(8, 8, 0.25, Role::PreObfuscated);
        let out = protect(&model, &x, Template::Image(&y), &key("g")).unwrap();

        let mut tape = Tape::new();
        let bound = model.bind(&mut tape, false);
        let map = secret_map(&model, &key("g")).unwrap();
        let (k, kkk) = broadcast_key::<f32>(&map, 1).unwrap();
        let xv = tape.constant(batch_of(&x).unwrap());
        let yv = tape.constant(batch_of(&y).unwrap());
        let kv = tape.constant(k);
        let lv = tape.constant(kkk);
        let (p, _) = protect_graph(&mut tape, &bound, xv, yv, kv).unwrap();
        assert_eq!(tape.value(p).select(0).unwrap(), *out.protected.tensor());
        let (r, _) = recover_graph(&mut tape, &bound, p, kv, lv).unwrap();
        let direct = recover(&model, &out.protected, &key("g")).unwrap();
        assert_eq!(tape.value(r).select(0).unwrap(), *direct.recovered.tensor());
    }

    #[test]
    fn size_mismatch_rejected() {
        let model = FlowModel::init(cfg(16), 0).unwrap();
        let spec = ObfuscatorSpec::eval(ObfuscatorKind::Pixelate);
        assert!(protect(&model, &face(8), Template::Obfuscate(&spec), &key("k")).is_err());
        let y = Image::filled(8, 8, 0.0, Role::PreObfuscated);
        assert!(protect(&model, &face(16), Template::Image(&y), &key("k")).is_err());
        assert!(recover(&model, &face(8), &key("k")).is_err());
    }
}

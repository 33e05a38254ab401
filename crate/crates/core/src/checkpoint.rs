//! HERDCKP1 checkpoint container.
//!
//! Little-endian layout:
//!
//! ```text
//! "HERDCKP\x01" | u32 version (1) | u32 input_dim | u32 loss variant
//!   (0 supcon, 1 supcon-learnable, 2 bce, 255 none) | f64 tau | f64 t | f64 b
//! | u64 step | u64 total_steps | f64 base_lr | f64 momentum | f64 weight_decay
//! | f64 velocity_t | f64 velocity_b
//! | tensors(params) | tensors(running stats) | tensors(velocity)
//! | u32 classifier outputs (0 = none) [| f32 W (outputs x 64) | f32 b]
//! tensors(x) = u32 count | count x (u64 len | len x f32)
//! ```
//!
//! Parameters use the canonical order of [`ProjectionHead::params`]; with a
//! classifier attached its weight and bias follow in the velocity list.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::head::{Linear, ProjectionHead, OUTPUT_DIM};
use crate::objective::{LossParams, LossVariant};
use crate::optim::OptimState;

pub const MAGIC: &[u8; 8] = b"HERDCKP\x01";
pub const VERSION: u32 = 1;
const MAX_TENSORS: u32 = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub head: ProjectionHead<f32>,
    pub loss: Option<LossParams>,
    pub optim: OptimState<f32>,
    pub classifier: Option<Linear<f32>>,
}

fn variant_code(loss: Option<&LossParams>) -> u32 {
    match loss.map(|l| l.variant) {
        Some(LossVariant::SupconFixed) => 0,
        Some(LossVariant::SupconLearnable) => 1,
        Some(LossVariant::Bce) => 2,
        None => 255,
    }
}

struct Writer<W: Write>(W);

impl<W: Write> Writer<W> {
    fn u32(&mut self, x: u32) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn u64(&mut self, x: u64) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn f64(&mut self, x: f64) -> Result<()> {
        Ok(self.0.write_all(&x.to_le_bytes())?)
    }
    fn values(&mut self, xs: &[f32]) -> Result<()> {
        let bytes: Vec<u8> = xs.iter().flat_map(|x| x.to_le_bytes()).collect();
        Ok(self.0.write_all(&bytes)?)
    }
    fn tensors(&mut self, ts: &[&[f32]]) -> Result<()> {
        self.u32(ts.len() as u32)?;
        for t in ts {
            self.u64(t.len() as u64)?;
            self.values(t)?;
        }
        Ok(())
    }
}

struct Reader<R: Read>(R);

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut b = [0u8; N];
        self.0.read_exact(&mut b).map_err(|e| match e.kind() {
            std::io::ErrorKind::UnexpectedEof => Error::Length("truncated checkpoint".into()),
            _ => Error::Io(e),
        })?;
        Ok(b)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
    fn values_into(&mut self, out: &mut [f32]) -> Result<()> {
        for x in out.iter_mut() {
            *x = f32::from_le_bytes(self.bytes()?);
            if !x.is_finite() {
                return Err(Error::Data("non-finite checkpoint value".into()));
            }
        }
        Ok(())
    }
    /// Read a tensor list into buffers of known lengths.
    fn tensors_into(&mut self, targets: Vec<&mut [f32]>) -> Result<()> {
        let count = self.u32()? as usize;
        if count != targets.len() {
            return Err(Error::Format(format!("expected {} tensors, found {count}", targets.len())));
        }
        for t in targets {
            let len = self.u64()?;
            if len != t.len() as u64 {
                return Err(Error::Format(format!("tensor length {len}, expected {}", t.len())));
            }
            self.values_into(t)?;
        }
        Ok(())
    }
}

pub fn write_checkpoint<W: Write>(ckpt: &Checkpoint, sink: W) -> Result<()> {
    let mut w = Writer(sink);
    w.0.write_all(MAGIC)?;
    w.u32(VERSION)?;
    w.u32(ckpt.head.input_dim() as u32)?;
    w.u32(variant_code(ckpt.loss.as_ref()))?;
    let loss = ckpt.loss.unwrap_or(LossParams { variant: LossVariant::Bce, tau: 0.0, t: 0.0, b: 0.0 });
    w.f64(loss.tau)?;
    w.f64(loss.t)?;
    w.f64(loss.b)?;
    let o = &ckpt.optim;
    w.u64(o.step)?;
    w.u64(o.total_steps)?;
    w.f64(o.base_lr)?;
    w.f64(o.momentum)?;
    w.f64(o.weight_decay)?;
    w.f64(o.scalar_velocity[0])?;
    w.f64(o.scalar_velocity[1])?;
    w.tensors(&ckpt.head.params())?;
    w.tensors(&ckpt.head.buffers())?;
    let velocity: Vec<&[f32]> = o.velocity.iter().map(Vec::as_slice).collect();
    w.tensors(&velocity)?;
    match &ckpt.classifier {
        None => w.u32(0)?,
        Some(c) => {
            w.u32(c.bias.len() as u32)?;
            w.values(c.weight.as_slice().unwrap())?;
            w.values(c.bias.as_slice().unwrap())?;
        }
    }
    w.0.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(source: R) -> Result<Checkpoint> {
    let mut r = Reader(source);
    if &r.bytes::<8>()? != MAGIC {
        return Err(Error::Format("bad magic, not a HERDCKP1 file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let input_dim = r.u32()? as usize;
    let code = r.u32()?;
    let (tau, t, b) = (r.f64()?, r.f64()?, r.f64()?);
    let variant = match code {
        0 => Some(LossVariant::SupconFixed),
        1 => Some(LossVariant::SupconLearnable),
        2 => Some(LossVariant::Bce),
        255 => None,
        c => return Err(Error::Format(format!("unknown loss variant {c}"))),
    };
    let loss = variant.map(|variant| LossParams { variant, tau, t, b });
    let mut optim = OptimState::<f32>::new(1.0, 1)?;
    optim.step = r.u64()?;
    optim.total_steps = r.u64()?;
    optim.base_lr = r.f64()?;
    optim.momentum = r.f64()?;
    optim.weight_decay = r.f64()?;
    optim.scalar_velocity = [r.f64()?, r.f64()?];

    let mut head = ProjectionHead::<f32>::init(input_dim, 0)?;
    r.tensors_into(head.params_mut())?;
    r.tensors_into(head.buffers_mut())?;
    let n_velocity = r.u32()?;
    if n_velocity > MAX_TENSORS {
        return Err(Error::Format(format!("implausible tensor count {n_velocity}")));
    }
    let mut velocity = Vec::with_capacity(n_velocity as usize);
    for _ in 0..n_velocity {
        let len = r.u64()?;
        if len > (1 << 32) {
            return Err(Error::Format(format!("implausible tensor length {len}")));
        }
        let mut v = vec![0f32; len as usize];
        r.values_into(&mut v)?;
        velocity.push(v);
    }
    optim.velocity = velocity;
    let outputs = r.u32()? as usize;
    let classifier = if outputs == 0 {
        None
    } else {
        let mut weight = Array2::<f32>::zeros((outputs, OUTPUT_DIM));
        let mut bias = Array1::<f32>::zeros(outputs);
        r.values_into(weight.as_slice_mut().unwrap())?;
        r.values_into(bias.as_slice_mut().unwrap())?;
        Some(Linear { weight, bias })
    };
    let mut probe = [0u8; 1];
    if r.0.read(&mut probe)? != 0 {
        return Err(Error::Length("trailing bytes after checkpoint".into()));
    }
    head.set_mode(crate::head::Mode::Eval);
    Ok(Checkpoint { head, loss, optim, classifier })
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    write_checkpoint(ckpt, BufWriter::new(File::create(path)?))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::head::Mode;
    use crate::seed;

    fn sample(classifier: bool) -> Checkpoint {
        let mut head = ProjectionHead::<f32>::init(5, 3).unwrap();
        head.norms[1].running_var.fill(0.25);
        head.set_mode(Mode::Eval);
        let mut optim = OptimState::<f32>::new(0.05, 100).unwrap();
        optim.step = 17;
        optim.velocity = head.params().iter().map(|p| vec![0.5; p.len()]).collect();
        optim.scalar_velocity = [0.1, -0.2];
        Checkpoint {
            head,
            loss: Some(LossParams { t: 12.5, ..LossParams::bce() }),
            optim,
            classifier: classifier.then(|| Linear::init(OUTPUT_DIM, 4, &mut seed::rng(2))),
        }
    }

    #[test]
    fn round_trip() {
        for with_classifier in [false, true] {
            let ckpt = sample(with_classifier);
            let mut bytes = Vec::new();
            write_checkpoint(&ckpt, &mut bytes).unwrap();
            assert_eq!(&bytes[..8], MAGIC);
            let back = read_checkpoint(&bytes[..]).unwrap();
            assert_eq!(back, ckpt);
            let mut again = Vec::new();
            write_checkpoint(&back, &mut again).unwrap();
            assert_eq!(again, bytes);
        }
    }

    #[test]
    fn rejects_corruption() {
        let mut bytes = Vec::new();
        write_checkpoint(&sample(false), &mut bytes).unwrap();
        assert!(matches!(read_checkpoint(&bytes[..bytes.len() - 2]), Err(Error::Length(_))));
        let mut bad = bytes.clone();
        bad[8] = 9;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[3] = 0;
        assert!(matches!(read_checkpoint(&bad[..]), Err(Error::Format(_))));
    }
}

//! Binary model checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"EEDM"
//! version u32 (currently 1)
//! arch    input-shape rank u32, dims u64...; num_classes u64;
//!         layer count u32; per layer a tag u8 plus tag-specific fields
//! params  for each parameterized layer, in layer order:
//!         dense/conv: weight, bias, mask tensors
//!         batchnorm:  gamma, beta, running_mean, running_var tensors
//! tensor  rank u32, dims u64..., data as raw f64 bits (u64 per element)
//! ```
//!
//! Values round-trip bit-exactly because they are stored as raw bit
//! patterns. Loading verifies the magic, version, arch consistency and that
//! no trailing bytes remain; errors carry the byte offset of the problem.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::netcore::{ArchSpec, BatchNorm, Conv2d, Dense, Layer, LayerSpec, Model, Tensor};
use crate::netcore::BATCHNORM_EPS;

pub const MAGIC: [u8; 4] = *b"EEDM";
pub const FORMAT_VERSION: u32 = 1;

const TAG_DENSE: u8 = 0;
const TAG_CONV2D: u8 = 1;
const TAG_BATCHNORM: u8 = 2;
const TAG_RELU: u8 = 3;
const TAG_SOFTMAX: u8 = 4;

struct Counting<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Counting<R> {
    fn exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner
            .read_exact(buf)
            .map_err(|e| Error::format(at, format!("truncated while reading {what}: {e}")))?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.exact(&mut b, what)?;
        Ok(b[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.exact(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.exact(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        let at = self.offset;
        let v = self.u64(what)?;
        usize::try_from(v).map_err(|_| Error::format(at, format!("{what} = {v} overflows usize")))
    }
}

fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_all(&(t.rank() as u32).to_le_bytes())?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    for &v in t.data() {
        w.write_all(&v.to_bits().to_le_bytes())?;
    }
    Ok(())
}

fn read_tensor<R: Read>(r: &mut Counting<R>, what: &str) -> Result<Tensor> {
    let at = r.offset;
    let rank = r.u32(what)? as usize;
    if rank > 8 {
        return Err(Error::format(at, format!("{what}: implausible rank {rank}")));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(r.usize(what)?);
    }
    let n: usize = shape.iter().product();
    if n > (1 << 32) {
        return Err(Error::format(
            at,
            format!("{what}: implausible element count {n}"),
        ));
    }
    let mut data = Vec::with_capacity(n);
    for _ in 0..n {
        data.push(f64::from_bits(r.u64(what)?));
    }
    Tensor::from_vec(&shape, data)
}

/// Serializes a model to a writer.
pub fn save_model(model: &Model, w: &mut impl Write) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&FORMAT_VERSION.to_le_bytes())?;
    let arch = model.arch();
    w.write_all(&(arch.input_shape.len() as u32).to_le_bytes())?;
    for &d in &arch.input_shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    w.write_all(&(arch.num_classes as u64).to_le_bytes())?;
    w.write_all(&(arch.layers.len() as u32).to_le_bytes())?;
    for spec in &arch.layers {
        match spec {
            LayerSpec::Dense { out } => {
                w.write_all(&[TAG_DENSE])?;
                w.write_all(&(*out as u64).to_le_bytes())?;
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
            } => {
                w.write_all(&[TAG_CONV2D])?;
                w.write_all(&(*out_channels as u64).to_le_bytes())?;
                w.write_all(&(*kernel as u64).to_le_bytes())?;
                w.write_all(&(*padding as u64).to_le_bytes())?;
            }
            LayerSpec::BatchNorm => w.write_all(&[TAG_BATCHNORM])?,
            LayerSpec::Relu => w.write_all(&[TAG_RELU])?,
            LayerSpec::Softmax => w.write_all(&[TAG_SOFTMAX])?,
        }
    }
    for layer in model.layers() {
        match layer {
            Layer::Dense(d) => {
                write_tensor(w, &d.weight)?;
                write_tensor(w, &d.bias)?;
                write_tensor(w, &d.mask)?;
            }
            Layer::Conv2d(c) => {
                write_tensor(w, &c.weight)?;
                write_tensor(w, &c.bias)?;
                write_tensor(w, &c.mask)?;
            }
            Layer::BatchNorm(bn) => {
                write_tensor(w, &bn.gamma)?;
                write_tensor(w, &bn.beta)?;
                write_tensor(w, &bn.running_mean)?;
                write_tensor(w, &bn.running_var)?;
            }
            Layer::Relu | Layer::Softmax => {}
        }
    }
    Ok(())
}

/// Deserializes a model, validating structure as it goes.
pub fn load_model(reader: impl Read) -> Result<Model> {
    let mut r = Counting {
        inner: reader,
        offset: 0,
    };
    let mut magic = [0u8; 4];
    r.exact(&mut magic, "magic")?;
    if magic != MAGIC {
        return Err(Error::format(
            0,
            format!("bad magic {magic:02x?}, expected {MAGIC:02x?}"),
        ));
    }
    let vat = r.offset;
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(
            vat,
            format!("unsupported format version {version}, expected {FORMAT_VERSION}"),
        ));
    }
    let rank = r.u32("input shape rank")? as usize;
    let mut input_shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        input_shape.push(r.usize("input shape dim")?);
    }
    let num_classes = r.usize("num_classes")?;
    let layer_count = r.u32("layer count")? as usize;
    let mut specs = Vec::with_capacity(layer_count);
    for i in 0..layer_count {
        let at = r.offset;
        let tag = r.u8("layer tag")?;
        let spec = match tag {
            TAG_DENSE => LayerSpec::Dense {
                out: r.usize("dense out")?,
            },
            TAG_CONV2D => LayerSpec::Conv2d {
                out_channels: r.usize("conv out_channels")?,
                kernel: r.usize("conv kernel")?,
                padding: r.usize("conv padding")?,
            },
            TAG_BATCHNORM => LayerSpec::BatchNorm,
            TAG_RELU => LayerSpec::Relu,
            TAG_SOFTMAX => LayerSpec::Softmax,
            t => return Err(Error::format(at, format!("unknown layer tag {t} (layer {i})"))),
        };
        specs.push(spec);
    }
    let arch = ArchSpec {
        input_shape,
        layers: specs,
        num_classes,
    };
    // Validates composition before reading parameters.
    let shapes = arch.layer_input_shapes()?;

    let mut layers = Vec::with_capacity(layer_count);
    for (i, spec) in arch.layers.iter().enumerate() {
        let at = r.offset;
        let layer = match spec {
            LayerSpec::Dense { out } => {
                let fin: usize = shapes[i].iter().product();
                let weight = read_tensor(&mut r, "dense weight")?;
                let bias = read_tensor(&mut r, "dense bias")?;
                let mask = read_tensor(&mut r, "dense mask")?;
                if weight.shape() != [*out, fin]
                    || bias.shape() != [*out]
                    || mask.shape() != weight.shape()
                {
                    return Err(Error::format(
                        at,
                        format!("dense layer {i} parameter shapes disagree with the architecture"),
                    ));
                }
                Layer::Dense(Dense { weight, bias, mask })
            }
            LayerSpec::Conv2d {
                out_channels,
                kernel,
                padding,
            } => {
                let ic = shapes[i][0];
                let weight = read_tensor(&mut r, "conv weight")?;
                let bias = read_tensor(&mut r, "conv bias")?;
                let mask = read_tensor(&mut r, "conv mask")?;
                if weight.shape() != [*out_channels, ic, *kernel, *kernel]
                    || bias.shape() != [*out_channels]
                    || mask.shape() != weight.shape()
                {
                    return Err(Error::format(
                        at,
                        format!("conv layer {i} parameter shapes disagree with the architecture"),
                    ));
                }
                Layer::Conv2d(Conv2d {
                    weight,
                    bias,
                    mask,
                    padding: *padding,
                })
            }
            LayerSpec::BatchNorm => {
                let channels = shapes[i][0];
                let gamma = read_tensor(&mut r, "batchnorm gamma")?;
                let beta = read_tensor(&mut r, "batchnorm beta")?;
                let running_mean = read_tensor(&mut r, "batchnorm running_mean")?;
                let running_var = read_tensor(&mut r, "batchnorm running_var")?;
                for t in [&gamma, &beta, &running_mean, &running_var] {
                    if t.shape() != [channels] {
                        return Err(Error::format(
                            at,
                            format!("batchnorm layer {i} parameter shapes disagree"),
                        ));
                    }
                }
                Layer::BatchNorm(BatchNorm {
                    gamma,
                    beta,
                    running_mean,
                    running_var,
                    eps: BATCHNORM_EPS,
                })
            }
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::Softmax => Layer::Softmax,
        };
        layers.push(layer);
    }
    let mut extra = [0u8; 1];
    if r.inner.read(&mut extra)? != 0 {
        return Err(Error::format(r.offset, "trailing bytes after model"));
    }
    Model::from_parts(arch, layers)
}

pub fn save_model_to_path(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    save_model(model, &mut w)?;
    w.flush()?;
    Ok(())
}

pub fn load_model_from_path(path: impl AsRef<Path>) -> Result<Model> {
    load_model(BufReader::new(File::open(path)?))
}

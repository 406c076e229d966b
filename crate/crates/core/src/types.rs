//! Image and label containers shared across the pipeline.

use ulrseg_tensor::Tensor;

use crate::error::{Error, Result};

/// Label value excluded from losses and metrics.
pub const IGNORE_INDEX: u8 = 255;

/// A `C×H×W` image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageTensor(Tensor);

impl ImageTensor {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.ndim() != 3 {
            return Err(Error::Shape(format!(
                "image must be C×H×W, got {:?}",
                t.shape()
            )));
        }
        Ok(Self(t))
    }

    pub fn filled(c: usize, h: usize, w: usize, value: f64) -> Self {
        Self(Tensor::full(&[c, h, w], value))
    }

    pub fn from_fn(c: usize, h: usize, w: usize, f: impl Fn(usize, usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(c * h * w);
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data.push(f(ch, y, x));
                }
            }
        }
        Self(Tensor::new(&[c, h, w], data))
    }

    pub fn channels(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.0.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.0.data()[(c * self.height() + y) * self.width() + x]
    }

    /// `1×C×H×W` view for network input.
    pub fn to_batch(&self) -> Tensor {
        let s = self.0.shape();
        self.0.reshape(&[1, s[0], s[1], s[2]])
    }

    /// Stacks same-shaped images into an NCHW batch.
    pub fn batch(images: &[&ImageTensor]) -> Tensor {
        let items: Vec<Tensor> = images.iter().map(|i| i.to_batch()).collect();
        Tensor::stack_batch(&items)
    }

    /// Extracts batch element `n` of an NCHW tensor.
    pub fn from_batch(t: &Tensor, n: usize) -> Self {
        let item = t.batch_item(n);
        let (_, c, h, w) = item.dims4();
        Self(item.into_reshape(&[c, h, w]))
    }

    /// Quantizes to 8 bits with round-half-up.
    pub fn to_u8(&self) -> Vec<u8> {
        self.0
            .data()
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0 + 0.5).floor() as u8)
            .collect()
    }

    /// Interleaved `H×W×3` RGB bytes (the PNG layout).
    pub fn to_rgb8_interleaved(&self) -> Result<Vec<u8>> {
        if self.channels() != 3 {
            return Err(Error::Shape("RGB export needs 3 channels".into()));
        }
        let planar = self.to_u8();
        let plane = self.height() * self.width();
        let mut out = Vec::with_capacity(planar.len());
        for p in 0..plane {
            for c in 0..3 {
                out.push(planar[c * plane + p]);
            }
        }
        Ok(out)
    }

    pub fn from_rgb8_interleaved(h: usize, w: usize, bytes: &[u8]) -> Result<Self> {
        if bytes.len() != h * w * 3 {
            return Err(Error::Shape(format!(
                "expected {} RGB bytes for {h}×{w}, got {}",
                h * w * 3,
                bytes.len()
            )));
        }
        Ok(Self::from_fn(3, h, w, |c, y, x| {
            bytes[(y * w + x) * 3 + c] as f64 / 255.0
        }))
    }
}

/// An `H×W` map of class indices; [`IGNORE_INDEX`] marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct LabelMap {
    height: usize,
    width: usize,
    data: Vec<u8>,
}

impl LabelMap {
    pub fn new(height: usize, width: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::Shape(format!(
                "label map {height}×{width} needs {} values, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self {
            height,
            width,
            data,
        })
    }

    pub fn filled(height: usize, width: usize, value: u8) -> Self {
        Self {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn from_fn(height: usize, width: usize, f: impl Fn(usize, usize) -> u8) -> Self {
        let mut data = Vec::with_capacity(height * width);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self {
            height,
            width,
            data,
        }
    }

    /// Builds a map from nested rows (handy for hand-written fixtures).
    pub fn from_rows<R: AsRef<[u8]>>(rows: &[R]) -> Result<Self> {
        let height = rows.len();
        let width = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(height * width);
        for r in rows {
            if r.as_ref().len() != width {
                return Err(Error::Shape("ragged label rows".into()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Self::new(height, width, data)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, v: u8) {
        self.data[y * self.width + x] = v;
    }

    pub fn same_shape(&self, other: &LabelMap) -> Result<()> {
        if (self.height, self.width) != (other.height, other.width) {
            return Err(Error::Shape(format!(
                "label maps differ: {}×{} vs {}×{}",
                self.height, self.width, other.height, other.width
            )));
        }
        Ok(())
    }

    /// Checks every value is a class below `num_classes` or `ignore_index`.
    pub fn validate(&self, num_classes: usize, ignore_index: u8) -> Result<()> {
        match self
            .data
            .iter()
            .find(|&&v| v != ignore_index && v as usize >= num_classes)
        {
            Some(v) => Err(Error::Label(format!(
                "value {v} outside [0, {num_classes}) and not the ignore index {ignore_index}"
            ))),
            None => Ok(()),
        }
    }

    pub fn count(&self, class: u8) -> usize {
        self.data.iter().filter(|&&v| v == class).count()
    }
}

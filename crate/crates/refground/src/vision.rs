//! Image side of the model: map a square image tensor to the S x S grid of
//! local visual features through a small trainable stack of 3x3 stride-2
//! convolution blocks with leaky-rectifier activations.
//!
//! Two coordinate ramp channels (x/size, y/size) can be appended to the input
//! so local features carry absolute position; a purely convolutional stack at
//! this depth is translation-equivariant and could not regress box corners
//! otherwise. The ramps are deterministic functions of position, so spatial
//! locality of the pixel channels is unaffected.

use crate::nn::{self, Param};
use crate::rng::Rng;
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::path::Path;

/// channels x size x size array, values in [0,1], layout [c][y][x].
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    pub channels: usize,
    pub size: usize,
    pub data: Vec<f64>,
}

impl ImageTensor {
    pub fn zeros(channels: usize, size: usize) -> Self {
        ImageTensor {
            channels,
            size,
            data: vec![0.0; channels * size * size],
        }
    }

    /// Normalize packed 8-bit RGB rows into a [0,1] tensor.
    pub fn from_rgb8(rgb: &[u8], size: usize) -> Self {
        assert_eq!(rgb.len(), 3 * size * size, "rgb buffer size mismatch");
        let mut t = ImageTensor::zeros(3, size);
        for y in 0..size {
            for x in 0..size {
                let src = (y * size + x) * 3;
                for c in 0..3 {
                    t.data[c * size * size + y * size + x] = rgb[src + c] as f64 / 255.0;
                }
            }
        }
        t
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.size + y) * self.size + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.size + y) * self.size + x] = v;
    }
}

/// N = S^2 local feature vectors of dimension `dim`, row-major over the grid
/// (cell index = row * S + col), stored cell-major: data[cell * dim + d].
#[derive(Debug, Clone)]
pub struct FeatureMap {
    pub s: usize,
    pub dim: usize,
    pub data: Vec<f64>,
}

impl FeatureMap {
    pub fn cells(&self) -> usize {
        self.s * self.s
    }

    pub fn cell(&self, n: usize) -> &[f64] {
        &self.data[n * self.dim..(n + 1) * self.dim]
    }
}

/// One 3x3 stride-2 pad-1 convolution followed by a leaky rectifier.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConvBlock {
    pub w: Param, // oc x (ic * 9)
    pub b: Param, // oc
    pub ic: usize,
    pub oc: usize,
}

impl ConvBlock {
    fn new(name: &str, ic: usize, oc: usize, rng: &mut Rng) -> Self {
        ConvBlock {
            w: Param::kaiming(name, oc, ic * 9, ic * 9, rng),
            b: Param::zeros(&format!("{name}.bias"), oc, 1),
            ic,
            oc,
        }
    }

    /// Post-activation output, [oc][oy][ox] with out_size = in_size / 2.
    ///
    /// With stride 2 and padding 1, only the oy = 0 row and ox = 0 column
    /// ever touch padding, so the interior runs branch-free with all nine
    /// taps unrolled.
    fn forward(&self, input: &[f64], in_size: usize) -> Vec<f64> {
        let out_size = in_size / 2;
        let mut out = vec![0.0; self.oc * out_size * out_size];
        for oc in 0..self.oc {
            let wrow = &self.w.value[oc * self.ic * 9..(oc + 1) * self.ic * 9];
            let bias = self.b.value[oc];
            for oy in 0..out_size {
                let ky_lo = usize::from(oy == 0);
                for ox in 0..out_size {
                    let kx_lo = usize::from(ox == 0);
                    let mut acc = bias;
                    for ic in 0..self.ic {
                        let plane = &input[ic * in_size * in_size..(ic + 1) * in_size * in_size];
                        let wk = &wrow[ic * 9..ic * 9 + 9];
                        for ky in ky_lo..3 {
                            let row = &plane[(2 * oy + ky - 1) * in_size..];
                            let w3 = &wk[ky * 3..ky * 3 + 3];
                            if kx_lo == 0 {
                                let c = 2 * ox - 1;
                                acc += w3[0] * row[c] + w3[1] * row[c + 1] + w3[2] * row[c + 2];
                            } else {
                                acc += w3[1] * row[0] + w3[2] * row[1];
                            }
                        }
                    }
                    out[(oc * out_size + oy) * out_size + ox] = nn::leaky_relu(acc);
                }
            }
        }
        out
    }

    /// Backward through activation + convolution. `d_out` is the gradient at
    /// the post-activation output; `output` is the cached forward output
    /// (its sign recovers the rectifier slope). Writes input gradients into
    /// `d_input` when provided.
    ///
    /// Runs tap-major: for each (ic, ky, kx) the weight gradient accumulates
    /// in a register over the whole output grid, and only the input-gradient
    /// writes touch memory.
    fn backward(
        &mut self,
        input: &[f64],
        output: &[f64],
        d_out: &[f64],
        in_size: usize,
        mut d_input: Option<&mut [f64]>,
    ) {
        let out_size = in_size / 2;
        let plane_len = in_size * in_size;
        let mut dz = vec![0.0; out_size * out_size];
        for oc in 0..self.oc {
            let n_out = out_size * out_size;
            let at = oc * n_out;
            let mut db = 0.0;
            for (d, (&g, &y)) in dz
                .iter_mut()
                .zip(d_out[at..at + n_out].iter().zip(&output[at..at + n_out]))
            {
                *d = g * nn::dleaky_from_y(y);
                db += *d;
            }
            self.b.grad[oc] += db;

            let wrow = &self.w.value[oc * self.ic * 9..(oc + 1) * self.ic * 9];
            let gr = &mut self.w.grad[oc * self.ic * 9..(oc + 1) * self.ic * 9];
            for ic in 0..self.ic {
                let plane = &input[ic * plane_len..(ic + 1) * plane_len];
                for ky in 0..3 {
                    let oy_lo = usize::from(ky == 0);
                    for kx in 0..3 {
                        let ox_lo = usize::from(kx == 0);
                        let k = ic * 9 + ky * 3 + kx;
                        let w = wrow[k];
                        let mut acc = 0.0;
                        for oy in oy_lo..out_size {
                            let dzrow = &dz[oy * out_size..(oy + 1) * out_size];
                            let irow_at = (2 * oy + ky - 1) * in_size + kx;
                            match d_input.as_deref_mut() {
                                Some(di) => {
                                    for ox in ox_lo..out_size {
                                        let d = dzrow[ox];
                                        let pix = irow_at + 2 * ox - 1;
                                        acc += d * plane[pix];
                                        di[ic * plane_len + pix] += d * w;
                                    }
                                }
                                None => {
                                    for ox in ox_lo..out_size {
                                        acc += dzrow[ox] * plane[irow_at + 2 * ox - 1];
                                    }
                                }
                            }
                        }
                        gr[k] += acc;
                    }
                }
            }
        }
    }
}

/// Forward caches for the backbone.
pub struct VisionCache {
    /// Block inputs; index 0 is the (possibly coordinate-augmented) image.
    inputs: Vec<Vec<f64>>,
    /// Post-activation block outputs.
    outputs: Vec<Vec<f64>>,
    sizes: Vec<usize>,
}

/// Stack of stride-2 conv blocks sized so an input of side `input_size`
/// lands on a grid of side `grid_s`. Output channels of the last block equal
/// the local feature dimension D_I.
///
/// With `coord_channels` on, the x/y ramps are appended to the input of
/// every block (at that block's resolution), so the final features carry
/// absolute position at full precision.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Backbone {
    pub blocks: Vec<ConvBlock>,
    pub image_channels: usize,
    pub coord_channels: bool,
    pub input_size: usize,
    pub grid_s: usize,
}

impl Backbone {
    /// `channels` lists the output channels per block; the last entry is D_I.
    pub fn new(
        input_size: usize,
        image_channels: usize,
        channels: &[usize],
        coord_channels: bool,
        rng: &mut Rng,
    ) -> Result<Self> {
        if channels.is_empty() {
            return Err(Error::Config("backbone needs at least one block".into()));
        }
        let stride: usize = 1 << channels.len();
        if !input_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "input size {input_size} not divisible by total stride {stride}"
            )));
        }
        let extra = if coord_channels { 2 } else { 0 };
        let mut blocks = Vec::new();
        let mut ic = image_channels;
        for (i, &oc) in channels.iter().enumerate() {
            blocks.push(ConvBlock::new(
                &format!("backbone.block{i}"),
                ic + extra,
                oc,
                rng,
            ));
            ic = oc;
        }
        if coord_channels {
            if let Some(last) = blocks.last_mut() {
                // Start the last two feature channels as an identity tap on
                // the ramp inputs, so cell coordinates are present in the
                // local features from step zero instead of having to be
                // rediscovered by gradient descent. The rows stay trainable.
                if last.oc >= 4 {
                    let ic = last.ic;
                    for (row, ramp) in [(last.oc - 2, ic - 2), (last.oc - 1, ic - 1)] {
                        let w = &mut last.w.value[row * ic * 9..(row + 1) * ic * 9];
                        w.iter_mut().for_each(|v| *v = 0.0);
                        w[ramp * 9 + 4] = 1.0; // center tap
                        // keep the pre-activation strictly positive so the
                        // channel stays on the linear side of the rectifier
                        last.b.value[row] = 0.05;
                    }
                }
            }
        }
        Ok(Backbone {
            blocks,
            image_channels,
            coord_channels,
            input_size,
            grid_s: input_size / stride,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.blocks.last().unwrap().oc
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.blocks
            .iter_mut()
            .flat_map(|b| vec![&mut b.w, &mut b.b])
            .collect()
    }

    /// Append x/y coordinate ramps (normalized to [0,1]) to a channel plane
    /// stack at resolution `size`.
    fn augment(&self, planes: &[f64], size: usize) -> Vec<f64> {
        if !self.coord_channels {
            return planes.to_vec();
        }
        let mut data = Vec::with_capacity(planes.len() + 2 * size * size);
        data.extend_from_slice(planes);
        let denom = (size - 1).max(1) as f64;
        for _y in 0..size {
            for x in 0..size {
                data.push(x as f64 / denom);
            }
        }
        for y in 0..size {
            for _x in 0..size {
                data.push(y as f64 / denom);
            }
        }
        data
    }

    /// Encode an image to the grid of local features.
    pub fn forward(&self, img: &ImageTensor) -> Result<(FeatureMap, VisionCache)> {
        if img.size != self.input_size || img.channels != self.image_channels {
            return Err(Error::Shape(format!(
                "image {}x{}x{} does not match backbone {}x{}x{}",
                img.channels,
                img.size,
                img.size,
                self.image_channels,
                self.input_size,
                self.input_size
            )));
        }
        let mut cache = VisionCache {
            inputs: vec![self.augment(&img.data, img.size)],
            outputs: Vec::new(),
            sizes: vec![img.size],
        };
        for (i, block) in self.blocks.iter().enumerate() {
            let in_size = cache.sizes[i];
            let out = block.forward(&cache.inputs[i], in_size);
            cache.sizes.push(in_size / 2);
            if i + 1 < self.blocks.len() {
                cache.inputs.push(self.augment(&out, in_size / 2));
            }
            cache.outputs.push(out);
        }

        let s = self.grid_s;
        let dim = self.feature_dim();
        let last = cache.outputs.last().unwrap();
        let mut fm = FeatureMap {
            s,
            dim,
            data: vec![0.0; s * s * dim],
        };
        for c in 0..dim {
            for y in 0..s {
                for x in 0..s {
                    fm.data[(y * s + x) * dim + c] = last[(c * s + y) * s + x];
                }
            }
        }
        Ok((fm, cache))
    }

    /// Accumulate parameter gradients given the gradient w.r.t. the feature
    /// map. The gradient w.r.t. the image itself is not needed and not
    /// computed.
    pub fn backward(&mut self, cache: &VisionCache, d_featmap: &[f64]) {
        let s = self.grid_s;
        let dim = self.feature_dim();
        let mut d_out = vec![0.0; dim * s * s];
        for c in 0..dim {
            for y in 0..s {
                for x in 0..s {
                    d_out[(c * s + y) * s + x] = d_featmap[(y * s + x) * dim + c];
                }
            }
        }
        for i in (0..self.blocks.len()).rev() {
            let in_size = cache.sizes[i];
            let needs_input_grad = i > 0;
            let mut d_in = if needs_input_grad {
                Some(vec![0.0; self.blocks[i].ic * in_size * in_size])
            } else {
                None
            };
            self.blocks[i].backward(
                &cache.inputs[i],
                &cache.outputs[i],
                &d_out,
                in_size,
                d_in.as_deref_mut(),
            );
            if let Some(mut d) = d_in {
                // drop gradients of the appended ramp channels: they are
                // constants, not outputs of the previous block
                d.truncate(self.blocks[i - 1].oc * in_size * in_size);
                d_out = d;
            }
        }
    }
}

/// Read an 8-bit RGB(A) PNG and normalize to [0,1], resizing to `size`
/// (nearest neighbor) when dimensions differ.
pub fn load_png(path: &Path, size: usize) -> Result<ImageTensor> {
    let file = std::fs::File::open(path)?;
    let decoder = png::Decoder::new(std::io::BufReader::new(file));
    let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::Png(e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let stride = match info.color_type {
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Grayscale => 1,
        other => return Err(Error::Png(format!("unsupported color type {other:?}"))),
    };
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Png("only 8-bit PNGs are supported".into()));
    }
    let mut t = ImageTensor::zeros(3, size);
    for y in 0..size {
        let sy = y * h / size;
        for x in 0..size {
            let sx = x * w / size;
            let src = (sy * w + sx) * stride;
            for c in 0..3 {
                let v = buf[src + if stride == 1 { 0 } else { c }];
                t.set(c, y, x, v as f64 / 255.0);
            }
        }
    }
    Ok(t)
}

/// Write an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, bytes: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), width as u32, height as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(bytes)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

/// Write an 8-bit RGB PNG.
pub fn write_rgb_png(path: &Path, size: usize, rgb: &[u8]) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), size as u32, size as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
    writer
        .write_image_data(rgb)
        .map_err(|e| Error::Png(e.to_string()))?;
    Ok(())
}

use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Windowed linear analysis/synthesis between waveforms and per-frame latents.
///
/// Frame `t` covers samples `[t·hop, t·hop + frame_len)`, zero-padded past the
/// end, so a signal of `n` samples yields `ceil(n / hop)` frames. With
/// `hop == frame_len` the window is rectangular; otherwise a periodic
/// square-root Hann window is used on both sides and overlap-add is
/// normalized by the summed squared window.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameCoder {
    frame_len: usize,
    hop: usize,
    window: Vec<f64>,
    /// `[frame_len, latent_dim]`: latent = frame · analysis
    pub(crate) analysis: Tensor,
    /// `[latent_dim, frame_len]`: frame = latent · synthesis
    pub(crate) synthesis: Tensor,
}

impl FrameCoder {
    pub fn new(frame_len: usize, hop: usize, analysis: Tensor, synthesis: Tensor) -> Result<Self> {
        if hop == 0 || hop > frame_len {
            return Err(Error::input(format!(
                "hop {hop} must be in 1..={frame_len}"
            )));
        }
        if analysis.rank() != 2
            || analysis.shape()[0] != frame_len
            || synthesis.shape() != [analysis.shape()[1], frame_len]
        {
            return Err(Error::shape("frame coder", analysis.shape(), synthesis.shape()));
        }
        let window = if hop == frame_len {
            vec![1.0; frame_len]
        } else {
            (0..frame_len)
                .map(|i| {
                    let x = std::f64::consts::PI * i as f64 / frame_len as f64;
                    x.sin()
                })
                .collect()
        };
        Ok(Self {
            frame_len,
            hop,
            window,
            analysis,
            synthesis,
        })
    }

    pub fn frame_len(&self) -> usize {
        self.frame_len
    }

    pub fn hop(&self) -> usize {
        self.hop
    }

    pub fn latent_dim(&self) -> usize {
        self.analysis.shape()[1]
    }

    pub fn frame_count(&self, num_samples: usize) -> usize {
        num_samples.div_ceil(self.hop)
    }

    /// Windowed frames, `[T, frame_len]`.
    pub fn frames(&self, wave: &[f64]) -> Tensor {
        let t = self.frame_count(wave.len());
        let mut data = vec![0.0; t * self.frame_len];
        for f in 0..t {
            let start = f * self.hop;
            let row = &mut data[f * self.frame_len..(f + 1) * self.frame_len];
            for (i, r) in row.iter_mut().enumerate() {
                if let Some(&s) = wave.get(start + i) {
                    *r = s * self.window[i];
                }
            }
        }
        Tensor::new(vec![t, self.frame_len], data).expect("frame buffer")
    }

    /// Per-frame latents, `[T, latent_dim]`.
    pub fn analyze(&self, wave: &[f64]) -> Tensor {
        self.frames(wave)
            .matmul(&self.analysis)
            .expect("analysis shape checked at construction")
    }

    /// Overlap-add synthesis; output length is `T·hop`.
    pub fn synthesize(&self, latents: &Tensor) -> Result<Vec<f64>> {
        if latents.rank() != 2 || latents.shape()[1] != self.latent_dim() {
            return Err(Error::shape("synthesize", latents.shape(), self.synthesis.shape()));
        }
        let t = latents.shape()[0];
        let frames = latents.matmul(&self.synthesis)?;
        let n = t * self.hop;
        let mut out = vec![0.0; n + self.frame_len];
        let mut norm = vec![0.0; n + self.frame_len];
        for f in 0..t {
            let start = f * self.hop;
            for (i, &v) in frames.row(f).iter().enumerate() {
                out[start + i] += v * self.window[i];
                norm[start + i] += self.window[i] * self.window[i];
            }
        }
        out.truncate(n);
        for (o, w) in out.iter_mut().zip(&norm) {
            if *w > 1e-8 {
                *o /= w;
            }
        }
        Ok(out)
    }
}

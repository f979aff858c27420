use super::FuseError;
use crate::ir::{Graph, Node};
use crate::tensor::Tensor;

/// Affine parameters and running statistics of a normalisation layer.
#[derive(Debug, Clone, PartialEq)]
pub struct NormParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl NormParams {
    pub fn new(gamma: Vec<f64>, beta: Vec<f64>, mean: Vec<f64>, var: Vec<f64>, eps: f64) -> Result<Self, FuseError> {
        let n = gamma.len();
        if beta.len() != n || mean.len() != n || var.len() != n {
            return Err(FuseError::ChannelMismatch(format!(
                "norm vectors have lengths {}, {}, {}, {}",
                n,
                beta.len(),
                mean.len(),
                var.len()
            )));
        }
        if let Some(v) = var.iter().find(|v| !(**v >= 0.0)) {
            return Err(FuseError::Scale(format!("negative variance {v}")));
        }
        if !(eps >= 0.0) {
            return Err(FuseError::Scale(format!("eps {eps} must be non-negative")));
        }
        Ok(NormParams {
            gamma,
            beta,
            mean,
            var,
            eps,
        })
    }

    pub fn identity(channels: usize) -> Self {
        NormParams {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps: 0.0,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Reads a batchnorm node's parameters.
    pub fn from_batchnorm(g: &Graph, node: &Node) -> Result<Self, FuseError> {
        let vec = |role: &str| -> Result<Vec<f64>, FuseError> {
            let t = g.param(node, role)?;
            Ok(t.as_f32()?.iter().map(|&v| v as f64).collect())
        };
        NormParams::new(
            vec("gamma")?,
            vec("beta")?,
            vec("mean")?,
            vec("var")?,
            node.attr_float("eps").unwrap_or(1e-5),
        )
    }

    fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var[c] + self.eps).sqrt()
    }
}

/// `γ*[o] = γ[o] / √(σ²[o] + ε)` and `β*[o] = β[o] − γ*[o] · μ[o]`.
pub fn bn_channelwise(np: &NormParams) -> (Vec<f64>, Vec<f64>) {
    (0..np.channels())
        .map(|c| {
            let g = np.gamma[c] * np.inv_std(c);
            (g, np.beta[c] - g * np.mean[c])
        })
        .unzip()
}

/// Folds the normalisation into the weights: `W_fuse[o, …] = γ*[o] · W[o, …]`,
/// returning `W_fuse` and `β*`.
pub fn bn_prefuse(w: &Tensor, np: &NormParams) -> Result<(Tensor, Vec<f64>), FuseError> {
    let o = *w.shape().first().unwrap_or(&0);
    if o != np.channels() {
        return Err(FuseError::ChannelMismatch(format!(
            "weight has {o} output channels, norm has {}",
            np.channels()
        )));
    }
    let (gs, bs) = bn_channelwise(np);
    let per = w.numel() / o.max(1);
    let data = w
        .as_f32()?
        .iter()
        .enumerate()
        .map(|(i, &v)| (gs[i / per] * v as f64) as f32)
        .collect();
    Ok((Tensor::from_f32(w.shape().to_vec(), data)?, bs))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn prefuse_example() {
        let np = NormParams::new(vec![2.0], vec![0.5], vec![1.0], vec![3.0], 1.0).unwrap();
        let w = Tensor::from_f32(vec![1, 1, 1, 1], vec![1.0]).unwrap();
        let (wf, b) = bn_prefuse(&w, &np).unwrap();
        assert_eq!(wf.as_f32().unwrap(), &[1.0]);
        assert_eq!(b, vec![-0.5]);
        let (g, _) = bn_channelwise(&np);
        assert_eq!(g, vec![1.0]);
    }

    #[test]
    fn identity_norm() {
        let np = NormParams::identity(2);
        let w = Tensor::from_f32(vec![2, 2], vec![0.3, -1.0, 2.5, 0.0]).unwrap();
        let (wf, b) = bn_prefuse(&w, &np).unwrap();
        assert_eq!(wf, w);
        assert_eq!(b, vec![0.0, 0.0]);
        assert_eq!(bn_channelwise(&np), (vec![1.0, 1.0], vec![0.0, 0.0]));
    }

    #[test]
    fn channel_mismatch() {
        let w = Tensor::from_f32(vec![3, 1], vec![1.0; 3]).unwrap();
        assert!(matches!(bn_prefuse(&w, &NormParams::identity(2)), Err(FuseError::ChannelMismatch(_))));
        assert!(NormParams::new(vec![1.0], vec![0.0], vec![0.0], vec![-1.0], 0.0).is_err());
    }
}

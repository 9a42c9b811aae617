//! Minimum-norm linear decoder `X = Psi^T (Psi Psi^T)^-1 Z` on the learned `Psi`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use hsics_tensor::Tensor;

use crate::encoder::as_measurement_matrix;
use crate::error::{Error, Result};
use crate::evaluate::encode_cube;
use crate::hsi_data::{reassemble, HsiCube, Stripe, StripeSet};
use crate::model::Model;

pub struct LinearBaseline {
    psi: DMatrix<f64>,
    gram: Cholesky<f64, Dyn>,
}

impl LinearBaseline {
    pub fn new(model: &Model) -> Result<Self> {
        let psi = as_measurement_matrix(&model.effective_encoder_weights()?, &model.enc)?;
        let gram = Cholesky::new(&psi * psi.transpose())
            .ok_or_else(|| Error::Numerical("measurement Gram matrix is not positive definite".into()))?;
        Ok(Self { psi, gram })
    }

    /// Minimum-norm solution for one stripe's flattened measurements.
    pub fn solve(&self, z: &[f32]) -> DVector<f64> {
        let z = DVector::from_iterator(z.len(), z.iter().map(|&v| v as f64));
        self.psi.transpose() * self.gram.solve(&z)
    }

    /// Encode `cube` with the model's encoder and invert linearly, clamped to `[0, 1]`.
    pub fn reconstruct(&self, model: &Model, cube: &HsiCube) -> Result<HsiCube> {
        let bs = encode_cube(model, cube, false)?;
        let shape = model.enc.stripe_shape(1);
        let stripes = bs
            .stripes
            .iter()
            .map(|s| {
                let x = self.solve(&s.to_tensor().into_vec());
                let data = x.iter().map(|&v| v.clamp(0.0, 1.0) as f32).collect();
                Ok(Stripe { index: s.index as usize, data: Tensor::from_vec(shape, data)? })
            })
            .collect::<Result<Vec<_>>>()?;
        reassemble(&StripeSet { source: String::new(), native_scale: cube.native_scale(), stripes })
    }
}

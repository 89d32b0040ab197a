use ndarray::{Array1, Array2, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{ModelConfig, CELL_VOCAB};
use super::ModelError;
use crate::arc_data::{CANVAS_CELLS, CANVAS_SIDE};

/// Weights of one trunk layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams<F> {
    /// Mixes along the canvas row axis, `[30 x 30]`.
    pub row_mix: Array2<F>,
    /// Mixes along the canvas column axis, `[30 x 30]`.
    pub col_mix: Array2<F>,
    pub mix_norm_gain: Array1<F>,
    pub ffn_in: Array2<F>,
    pub ffn_in_bias: Array1<F>,
    pub ffn_out: Array2<F>,
    pub ffn_out_bias: Array1<F>,
    pub ffn_norm_gain: Array1<F>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Parameters<F> {
    pub config: ModelConfig,
    pub cell_embedding: Array2<F>,
    pub position_embedding: Array2<F>,
    /// Row 0 belongs to the blank identifier.
    pub id_embedding: Array2<F>,
    pub layers: Vec<LayerParams<F>>,
    pub head: Array2<F>,
}

pub(crate) fn cast<F: NdFloat>(x: f64) -> F {
    F::from(x).expect("finite constant")
}

impl<F: NdFloat> Parameters<F> {
    /// All-zero tensors with the shapes `config` declares. Used for gradients
    /// and optimizer state.
    pub fn zeros(config: &ModelConfig) -> Self {
        let d = config.d_model;
        let h = config.hidden();
        let layer = || LayerParams {
            row_mix: Array2::zeros((CANVAS_SIDE, CANVAS_SIDE)),
            col_mix: Array2::zeros((CANVAS_SIDE, CANVAS_SIDE)),
            mix_norm_gain: Array1::zeros(d),
            ffn_in: Array2::zeros((d, h)),
            ffn_in_bias: Array1::zeros(h),
            ffn_out: Array2::zeros((h, d)),
            ffn_out_bias: Array1::zeros(d),
            ffn_norm_gain: Array1::zeros(d),
        };
        Self {
            config: config.clone(),
            cell_embedding: Array2::zeros((CELL_VOCAB, d)),
            position_embedding: Array2::zeros((CANVAS_CELLS, d)),
            id_embedding: Array2::zeros((config.id_vocab_size, d)),
            layers: (0..config.trunk_layers).map(|_| layer()).collect(),
            head: Array2::zeros((d, CELL_VOCAB)),
        }
    }

    /// `(name, shape, values)` for every tensor in a fixed order.
    pub fn tensors(&self) -> Vec<(String, Vec<usize>, &[F])> {
        fn entry<'a, F, D: ndarray::Dimension>(
            name: String,
            a: &'a ndarray::Array<F, D>,
        ) -> (String, Vec<usize>, &'a [F]) {
            (name, a.shape().to_vec(), a.as_slice().expect("standard layout"))
        }
        let mut out = vec![
            entry("cell_embedding".into(), &self.cell_embedding),
            entry("position_embedding".into(), &self.position_embedding),
            entry("id_embedding".into(), &self.id_embedding),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            out.push(entry(format!("layers.{i}.row_mix"), &l.row_mix));
            out.push(entry(format!("layers.{i}.col_mix"), &l.col_mix));
            out.push(entry(format!("layers.{i}.mix_norm_gain"), &l.mix_norm_gain));
            out.push(entry(format!("layers.{i}.ffn_in"), &l.ffn_in));
            out.push(entry(format!("layers.{i}.ffn_in_bias"), &l.ffn_in_bias));
            out.push(entry(format!("layers.{i}.ffn_out"), &l.ffn_out));
            out.push(entry(format!("layers.{i}.ffn_out_bias"), &l.ffn_out_bias));
            out.push(entry(format!("layers.{i}.ffn_norm_gain"), &l.ffn_norm_gain));
        }
        out.push(entry("head".into(), &self.head));
        out
    }

    /// Mutable views in the same order as [`Parameters::tensors`].
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [F])> {
        fn entry<'a, F, D: ndarray::Dimension>(
            name: String,
            a: &'a mut ndarray::Array<F, D>,
        ) -> (String, &'a mut [F]) {
            (name, a.as_slice_mut().expect("standard layout"))
        }
        let mut out = vec![
            entry("cell_embedding".into(), &mut self.cell_embedding),
            entry("position_embedding".into(), &mut self.position_embedding),
            entry("id_embedding".into(), &mut self.id_embedding),
        ];
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push(entry(format!("layers.{i}.row_mix"), &mut l.row_mix));
            out.push(entry(format!("layers.{i}.col_mix"), &mut l.col_mix));
            out.push(entry(format!("layers.{i}.mix_norm_gain"), &mut l.mix_norm_gain));
            out.push(entry(format!("layers.{i}.ffn_in"), &mut l.ffn_in));
            out.push(entry(format!("layers.{i}.ffn_in_bias"), &mut l.ffn_in_bias));
            out.push(entry(format!("layers.{i}.ffn_out"), &mut l.ffn_out));
            out.push(entry(format!("layers.{i}.ffn_out_bias"), &mut l.ffn_out_bias));
            out.push(entry(format!("layers.{i}.ffn_norm_gain"), &mut l.ffn_norm_gain));
        }
        out.push(entry("head".into(), &mut self.head));
        out
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, _, d)| d.len()).sum()
    }

    /// Converts every tensor to another float type.
    pub fn cast<G: NdFloat>(&self) -> Parameters<G> {
        let c2 = |a: &Array2<F>| a.mapv(|v| G::from(v).expect("finite"));
        let c1 = |a: &Array1<F>| a.mapv(|v| G::from(v).expect("finite"));
        Parameters {
            config: self.config.clone(),
            cell_embedding: c2(&self.cell_embedding),
            position_embedding: c2(&self.position_embedding),
            id_embedding: c2(&self.id_embedding),
            layers: self
                .layers
                .iter()
                .map(|l| LayerParams {
                    row_mix: c2(&l.row_mix),
                    col_mix: c2(&l.col_mix),
                    mix_norm_gain: c1(&l.mix_norm_gain),
                    ffn_in: c2(&l.ffn_in),
                    ffn_in_bias: c1(&l.ffn_in_bias),
                    ffn_out: c2(&l.ffn_out),
                    ffn_out_bias: c1(&l.ffn_out_bias),
                    ffn_norm_gain: c1(&l.ffn_norm_gain),
                })
                .collect(),
            head: c2(&self.head),
        }
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, scale: F) {
        let src = other.tensors();
        for ((_, dst), (_, _, s)) in self.tensors_mut().into_iter().zip(src) {
            for (d, &v) in dst.iter_mut().zip(s) {
                *d += scale * v;
            }
        }
    }

    pub fn scale(&mut self, factor: F) {
        for (_, t) in self.tensors_mut() {
            t.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn sum_of_squares(&self) -> F {
        self.tensors()
            .iter()
            .flat_map(|(_, _, d)| d.iter())
            .fold(F::zero(), |acc, &v| acc + v * v)
    }

    /// First tensor containing a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.tensors()
            .into_iter()
            .find(|(_, _, d)| d.iter().any(|v| !v.is_finite()))
            .map(|(name, _, _)| name)
    }
}

/// Deterministic initialization: weights and embeddings uniform with standard
/// deviation `1/sqrt(d_model)`, biases zero, normalization gains one.
pub fn init_params<F: NdFloat>(config: &ModelConfig) -> Result<Parameters<F>, ModelError> {
    config.validate()?;
    let mut p = Parameters::<F>::zeros(config);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let limit = (3.0 / config.d_model as f64).sqrt();
    let mut fill = |a: &mut Array2<F>| {
        a.iter_mut().for_each(|v| *v = cast(rng.random_range(-limit..limit)));
    };
    fill(&mut p.cell_embedding);
    fill(&mut p.position_embedding);
    fill(&mut p.id_embedding);
    for l in &mut p.layers {
        fill(&mut l.row_mix);
        fill(&mut l.col_mix);
        fill(&mut l.ffn_in);
        fill(&mut l.ffn_out);
        l.mix_norm_gain.fill(F::one());
        l.ffn_norm_gain.fill(F::one());
    }
    fill(&mut p.head);
    Ok(p)
}

//! Trainable blocks: the two domain projectors, the shared classifier and the
//! dandelion discriminator. Every block is a single affine layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DomainTag;
use crate::error::{Error, Result};
use crate::numerics::{Tape, Tensor, Var};

pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_source: usize,
    pub d_target: usize,
    pub d_common: usize,
    pub d_graph: usize,
    /// Number of shared categories; the classifier has `k + 1` outputs.
    pub k: usize,
}

/// `x · weight + bias`, with `weight` stored `in × out`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Affine {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Affine {
    fn init(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (6.0 / fan_in as f64).sqrt();
        Self {
            weight: Tensor::from_fn(fan_in, fan_out, |_, _| rng.random_range(-bound..bound)),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(fan_in, fan_out),
            bias: Tensor::zeros(1, fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.rows()
    }

    pub fn fan_out(&self) -> usize {
        self.weight.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub dims: Dims,
    pub source_projector: Affine,
    pub target_projector: Affine,
    pub classifier: Affine,
    pub discriminator: Affine,
    /// Instance-level domain discriminator, used only by the domain-adversarial ablation.
    pub instance_discriminator: Affine,
}

/// Tape handles for every parameter of a [`Model`], in [`Model::params`] order.
#[derive(Clone, Copy, Debug)]
pub struct ModelVars {
    pub source_w: Var,
    pub source_b: Var,
    pub target_w: Var,
    pub target_b: Var,
    pub classifier_w: Var,
    pub classifier_b: Var,
    pub disc_w: Var,
    pub disc_b: Var,
    pub inst_w: Var,
    pub inst_b: Var,
}

impl ModelVars {
    pub fn all(&self) -> [Var; 10] {
        [
            self.source_w,
            self.source_b,
            self.target_w,
            self.target_b,
            self.classifier_w,
            self.classifier_b,
            self.disc_w,
            self.disc_b,
            self.inst_w,
            self.inst_b,
        ]
    }
}

pub const PARAM_NAMES: [&str; 10] = [
    "source_projector.weight",
    "source_projector.bias",
    "target_projector.weight",
    "target_projector.bias",
    "classifier.weight",
    "classifier.bias",
    "discriminator.weight",
    "discriminator.bias",
    "instance_discriminator.weight",
    "instance_discriminator.bias",
];

pub fn init_model(dims: Dims, seed: u64) -> Result<Model> {
    let Dims {
        d_source,
        d_target,
        d_common,
        d_graph,
        k,
    } = dims;
    if [d_source, d_target, d_common, d_graph, k].contains(&0) {
        return Err(Error::InvalidParameter(format!("all model dims must be >= 1: {dims:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(Model {
        dims,
        source_projector: Affine::init(d_source, d_common, &mut rng),
        target_projector: Affine::init(d_target, d_common, &mut rng),
        classifier: Affine::init(d_common, k + 1, &mut rng),
        discriminator: Affine::init(d_graph, 1, &mut rng),
        instance_discriminator: Affine::init(d_common, 1, &mut rng),
    })
}

impl Model {
    pub fn params(&self) -> [&Tensor; 10] {
        [
            &self.source_projector.weight,
            &self.source_projector.bias,
            &self.target_projector.weight,
            &self.target_projector.bias,
            &self.classifier.weight,
            &self.classifier.bias,
            &self.discriminator.weight,
            &self.discriminator.bias,
            &self.instance_discriminator.weight,
            &self.instance_discriminator.bias,
        ]
    }

    pub fn params_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.source_projector.weight,
            &mut self.source_projector.bias,
            &mut self.target_projector.weight,
            &mut self.target_projector.bias,
            &mut self.classifier.weight,
            &mut self.classifier.bias,
            &mut self.discriminator.weight,
            &mut self.discriminator.bias,
            &mut self.instance_discriminator.weight,
            &mut self.instance_discriminator.bias,
        ]
    }

    /// Checks that every block matches the declared dims.
    pub fn validate(&self) -> Result<()> {
        let d = self.dims;
        let expect = [
            (&self.source_projector, d.d_source, d.d_common, "source_projector"),
            (&self.target_projector, d.d_target, d.d_common, "target_projector"),
            (&self.classifier, d.d_common, d.k + 1, "classifier"),
            (&self.discriminator, d.d_graph, 1, "discriminator"),
            (&self.instance_discriminator, d.d_common, 1, "instance_discriminator"),
        ];
        for (a, i, o, name) in expect {
            if a.weight.shape() != (i, o) || a.bias.shape() != (1, o) {
                return Err(Error::shape(
                    "model block",
                    format!("{name} {i}x{o} + 1x{o}"),
                    format!(
                        "{}x{} + {}x{}",
                        a.weight.rows(),
                        a.weight.cols(),
                        a.bias.rows(),
                        a.bias.cols()
                    ),
                ));
            }
        }
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn record(&self, tape: &mut Tape) -> ModelVars {
        let p = self.params();
        ModelVars {
            source_w: tape.leaf(p[0].clone()),
            source_b: tape.leaf(p[1].clone()),
            target_w: tape.leaf(p[2].clone()),
            target_b: tape.leaf(p[3].clone()),
            classifier_w: tape.leaf(p[4].clone()),
            classifier_b: tape.leaf(p[5].clone()),
            disc_w: tape.leaf(p[6].clone()),
            disc_b: tape.leaf(p[7].clone()),
            inst_w: tape.leaf(p[8].clone()),
            inst_b: tape.leaf(p[9].clone()),
        }
    }

    fn projector(&self, origin: DomainTag) -> &Affine {
        match origin {
            DomainTag::Source => &self.source_projector,
            DomainTag::Target => &self.target_projector,
        }
    }

    pub fn check_input(&self, x: &Tensor, origin: DomainTag) -> Result<()> {
        let want = self.projector(origin).fan_in();
        if x.cols() != want {
            return Err(Error::shape(
                match origin {
                    DomainTag::Source => "source projector input",
                    DomainTag::Target => "target projector input",
                },
                format!("{want} columns"),
                format!("{} columns", x.cols()),
            ));
        }
        Ok(())
    }

    /// Maps a batch into the common subspace: affine, LeakyReLU, then row L2 normalization.
    pub fn project(&self, x: &Tensor, origin: DomainTag) -> Result<Tensor> {
        self.check_input(x, origin)?;
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let xv = tape.leaf(x.clone());
        let f = project_var(&mut tape, &vars, xv, origin);
        Ok(tape.value(f).clone())
    }

    /// Softmax over the `K + 1` classes for each projected row.
    pub fn classify(&self, f: &Tensor) -> Result<Tensor> {
        if f.cols() != self.dims.d_common {
            return Err(Error::shape("classifier input", self.dims.d_common, f.cols()));
        }
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let fv = tape.leaf(f.clone());
        let p = classify_var(&mut tape, &vars, fv);
        Ok(tape.value(p).clone())
    }

    /// Discriminator probability that each graph embedding row is a real dandelion.
    pub fn discriminate(&self, phi: &Tensor) -> Result<Vec<f64>> {
        if phi.cols() != self.dims.d_graph {
            return Err(Error::shape("discriminator input", self.dims.d_graph, phi.cols()));
        }
        let mut tape = Tape::new();
        let vars = self.record(&mut tape);
        let pv = tape.leaf(phi.clone());
        let d = discriminate_var(&mut tape, &vars, pv);
        Ok(tape.value(d).data().to_vec())
    }
}

pub fn project_var(tape: &mut Tape, vars: &ModelVars, x: Var, origin: DomainTag) -> Var {
    let (w, b) = match origin {
        DomainTag::Source => (vars.source_w, vars.source_b),
        DomainTag::Target => (vars.target_w, vars.target_b),
    };
    let z = tape.matmul(x, w);
    let z = tape.add_row(z, b);
    let a = tape.leaky_relu(z, LEAKY_SLOPE);
    tape.normalize_rows(a)
}

pub fn classify_var(tape: &mut Tape, vars: &ModelVars, f: Var) -> Var {
    let z = tape.matmul(f, vars.classifier_w);
    let z = tape.add_row(z, vars.classifier_b);
    tape.softmax_rows(z)
}

/// `n × 1` column of sigmoid outputs.
pub fn discriminate_var(tape: &mut Tape, vars: &ModelVars, phi: Var) -> Var {
    let z = tape.matmul(phi, vars.disc_w);
    let z = tape.add_row(z, vars.disc_b);
    tape.sigmoid(z)
}

pub fn instance_discriminate_var(tape: &mut Tape, vars: &ModelVars, f: Var) -> Var {
    let z = tape.matmul(f, vars.inst_w);
    let z = tape.add_row(z, vars.inst_b);
    tape.sigmoid(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::norm;

    fn dims() -> Dims {
        Dims {
            d_source: 20,
            d_target: 16,
            d_common: 64,
            d_graph: 32,
            k: 4,
        }
    }

    #[test]
    fn init_shapes_and_determinism() {
        let m = init_model(dims(), 3).unwrap();
        assert_eq!(m.source_projector.weight.shape(), (20, 64));
        assert_eq!(m.classifier.weight.shape(), (64, 5));
        assert_eq!(m, init_model(dims(), 3).unwrap());
        assert_ne!(m, init_model(dims(), 4).unwrap());
        assert!(m.source_projector.bias.data().iter().all(|&b| b == 0.0));
        let bound = (6.0f64 / 20.0).sqrt();
        assert!(m.source_projector.weight.data().iter().all(|w| w.abs() <= bound));
        m.validate().unwrap();
    }

    #[test]
    fn zero_dim_is_rejected() {
        assert!(init_model(Dims { k: 0, ..dims() }, 1).is_err());
    }

    #[test]
    fn project_routes_and_normalizes() {
        let m = init_model(dims(), 1).unwrap();
        let x = Tensor::from_fn(7, 20, |i, j| ((i * 31 + j * 7) % 11) as f64 - 5.0);
        let f = m.project(&x, DomainTag::Source).unwrap();
        assert_eq!(f.shape(), (7, 64));
        for r in f.row_iter() {
            assert!((norm(r) - 1.0).abs() < 1e-9);
        }
        assert!(matches!(m.project(&x, DomainTag::Target), Err(Error::Shape { .. })));
    }

    #[test]
    fn leaky_relu_slope_on_negative_preactivation() {
        let mut m = init_model(
            Dims {
                d_source: 1,
                d_target: 1,
                d_common: 2,
                d_graph: 1,
                k: 1,
            },
            0,
        )
        .unwrap();
        m.source_projector.weight = Tensor::row_vector(vec![-1.0, 0.0]);
        m.source_projector.bias = Tensor::row_vector(vec![0.0, 0.02]);
        // pre-activation [-1, 0.02] -> [-0.01, 0.02] before normalization
        let f = m.project(&Tensor::scalar(1.0), DomainTag::Source).unwrap();
        let n = (0.01f64.powi(2) + 0.02f64.powi(2)).sqrt();
        assert!((f.get(0, 0) + 0.01 / n).abs() < 1e-12);
        assert!((f.get(0, 1) - 0.02 / n).abs() < 1e-12);
    }

    #[test]
    fn classify_is_uniform_for_zero_classifier() {
        let mut m = init_model(dims(), 2).unwrap();
        m.classifier = Affine::zeros(64, 5);
        let f = Tensor::from_fn(3, 64, |i, j| (i + j) as f64);
        let p = m.classify(&f).unwrap();
        assert_eq!(p.shape(), (3, 5));
        assert!(p.data().iter().all(|&v| (v - 0.2).abs() < 1e-15));
    }

    #[test]
    fn discriminator_midpoint_and_range() {
        let mut m = init_model(dims(), 2).unwrap();
        let phi = Tensor::from_fn(4, 32, |i, j| ((i + 2 * j) % 5) as f64 * 0.3 - 0.6);
        let d = m.discriminate(&phi).unwrap();
        assert_eq!(d.len(), 4);
        assert!(d.iter().all(|&v| v > 0.0 && v < 1.0));
        m.discriminator = Affine::zeros(32, 1);
        assert!(m.discriminate(&phi).unwrap().iter().all(|&v| v == 0.5));
    }
}

//! Learned heads mapping pooled tokens into the CLS embedding space.

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::encoders::layers::{gelu, gelu_grad, Linear};
use crate::encoders::params::{join, Params, Visitor, VisitorMut};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProjectionKind {
    /// `x·W + b`, initialized to the identity.
    #[default]
    Affine,
    /// `gelu(x·W₁ + b₁)·W₂ + b₂`.
    Mlp,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Head {
    pub first: Linear,
    pub second: Option<Linear>,
}

pub struct HeadCache {
    x: Array2<f64>,
    pre: Option<Array2<f64>>,
}

impl Head {
    pub fn new<R: Rng>(kind: ProjectionKind, dim: usize, rng: &mut R) -> Self {
        match kind {
            ProjectionKind::Affine => Head {
                first: Linear::identity(dim),
                second: None,
            },
            ProjectionKind::Mlp => Head {
                first: Linear::new(rng, dim, dim),
                second: Some(Linear::new(rng, dim, dim)),
            },
        }
    }

    pub fn kind(&self) -> ProjectionKind {
        if self.second.is_some() {
            ProjectionKind::Mlp
        } else {
            ProjectionKind::Affine
        }
    }

    pub fn forward(&self, x: &Array2<f64>) -> (Array2<f64>, HeadCache) {
        let h = self.first.forward(x);
        match &self.second {
            None => (h, HeadCache { x: x.clone(), pre: None }),
            Some(l2) => {
                let y = l2.forward(&h.mapv(gelu));
                (y, HeadCache { x: x.clone(), pre: Some(h) })
            }
        }
    }

    pub fn backward(&self, c: &HeadCache, dy: &Array2<f64>, g: &mut Head) -> Array2<f64> {
        match (&self.second, &c.pre) {
            (Some(l2), Some(pre)) => {
                let act = pre.mapv(gelu);
                let dact = l2.backward(&act, dy, g.second.as_mut().expect("same kind"));
                let dpre = dact * pre.mapv(gelu_grad);
                self.first.backward(&c.x, &dpre, &mut g.first)
            }
            _ => self.first.backward(&c.x, dy, &mut g.first),
        }
    }
}

impl Params for Head {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.first.visit(&join(prefix, "first"), f);
        if let Some(l2) = &self.second {
            l2.visit(&join(prefix, "second"), f);
        }
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.first.visit_mut(&join(prefix, "first"), f);
        if let Some(l2) = &mut self.second {
            l2.visit_mut(&join(prefix, "second"), f);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Text,
    Vision,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionHeads {
    pub text: Head,
    pub vision: Head,
}

impl ProjectionHeads {
    pub fn new<R: Rng>(kind: ProjectionKind, dim: usize, rng: &mut R) -> Self {
        ProjectionHeads {
            text: Head::new(kind, dim, rng),
            vision: Head::new(kind, dim, rng),
        }
    }

    pub fn head(&self, which: Modality) -> &Head {
        match which {
            Modality::Text => &self.text,
            Modality::Vision => &self.vision,
        }
    }
}

/// Project a single pooled vector.
pub fn project(v: &Array1<f64>, which: Modality, heads: &ProjectionHeads) -> Array1<f64> {
    let x = v.view().insert_axis(ndarray::Axis(0)).to_owned();
    heads.head(which).forward(&x).0.row(0).to_owned()
}

impl Params for ProjectionHeads {
    fn visit(&self, prefix: &str, f: &mut Visitor<'_>) {
        self.text.visit(&join(prefix, "text"), f);
        self.vision.visit(&join(prefix, "vision"), f);
    }
    fn visit_mut(&mut self, prefix: &str, f: &mut VisitorMut<'_>) {
        self.text.visit_mut(&join(prefix, "text"), f);
        self.vision.visit_mut(&join(prefix, "vision"), f);
    }
}

use crate::error::{Error, Result};
use crate::ndcore::{l2_normalize_rows, l2_normalize_rows_backward, Matrix, Param, Rng};

use super::{Mlp, MlpCache, MlpSpec, PrototypeBank};

/// Widths of every network, fixed by the dataset and the config.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ModelDims {
    pub feature_dim: usize,
    pub attr_dim: usize,
    pub noise_dim: usize,
    /// Hidden width of G and D (4096 at full scale).
    pub gan_hidden: usize,
    /// Hidden width of E.
    pub embed_hidden: usize,
    pub d_h: usize,
    pub d_z: usize,
    pub leaky_slope: f64,
}

/// `x' = G([a ; z])`.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator {
    pub net: Mlp,
    pub attr_dim: usize,
    pub noise_dim: usize,
}

/// Critic `D([x ; a])` with scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct Discriminator {
    pub net: Mlp,
    pub feature_dim: usize,
    pub attr_dim: usize,
}

/// `h = E(x)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingNet {
    pub net: Mlp,
}

/// Projection head `H(h)`; its output is L2-normalized before use.
#[derive(Clone, Debug, PartialEq)]
pub struct ProjectionNet {
    pub net: Mlp,
}

/// `RN([h ; a])` with raw scalar output.
#[derive(Clone, Debug, PartialEq)]
pub struct RelationNet {
    pub net: Mlp,
    pub d_h: usize,
    pub attr_dim: usize,
}

impl Generator {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(
            vec![dims.attr_dim + dims.noise_dim, dims.gan_hidden, dims.feature_dim],
            dims.leaky_slope,
        );
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            attr_dim: dims.attr_dim,
            noise_dim: dims.noise_dim,
        })
    }

    pub fn input(&self, attrs: &Matrix, noise: &Matrix) -> Result<Matrix> {
        if attrs.cols() != self.attr_dim || noise.cols() != self.noise_dim {
            return Err(Error::Dimension {
                op: "generator input",
                left: attrs.shape(),
                right: noise.shape(),
            });
        }
        attrs.hconcat(noise)
    }

    /// One `N(0, I)` noise row per attribute row.
    pub fn sample_noise(&self, rows: usize, rng: &mut Rng) -> Matrix {
        Matrix::from_fn(rows, self.noise_dim, |_, _| rng.normal())
    }
}

impl Discriminator {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(
            vec![dims.feature_dim + dims.attr_dim, dims.gan_hidden, 1],
            dims.leaky_slope,
        );
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            feature_dim: dims.feature_dim,
            attr_dim: dims.attr_dim,
        })
    }

    pub fn input(&self, x: &Matrix, attrs: &Matrix) -> Result<Matrix> {
        if x.cols() != self.feature_dim || attrs.cols() != self.attr_dim || x.rows() != attrs.rows() {
            return Err(Error::Dimension {
                op: "discriminator input",
                left: x.shape(),
                right: attrs.shape(),
            });
        }
        x.hconcat(attrs)
    }
}

impl EmbeddingNet {
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(
            vec![dims.feature_dim, dims.embed_hidden, dims.d_h],
            dims.leaky_slope,
        );
        Ok(Self {
            net: Mlp::init(spec, rng)?,
        })
    }
}

impl ProjectionNet {
    /// One LeakyReLU layer of width `D_z` followed by a linear map to `D_z`.
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(vec![dims.d_h, dims.d_z, dims.d_z], dims.leaky_slope);
        Ok(Self {
            net: Mlp::init(spec, rng)?,
        })
    }
}

impl RelationNet {
    /// Hidden width equals `D_h`.
    pub fn init(dims: &ModelDims, rng: &mut Rng) -> Result<Self> {
        let spec = MlpSpec::new(vec![dims.d_h + dims.attr_dim, dims.d_h, 1], dims.leaky_slope);
        Ok(Self {
            net: Mlp::init(spec, rng)?,
            d_h: dims.d_h,
            attr_dim: dims.attr_dim,
        })
    }
}

/// Synthesizes `n_per_class` features for every attribute row, with fresh
/// noise per sample. Labels are attribute-row indices, grouped by class.
pub fn generate_features(
    g: &Generator,
    attrs: &Matrix,
    rng: &mut Rng,
    n_per_class: usize,
) -> Result<(Matrix, Vec<usize>)> {
    let labels: Vec<usize> = (0..attrs.rows())
        .flat_map(|c| std::iter::repeat_n(c, n_per_class))
        .collect();
    let a = attrs.select_rows(&labels);
    let z = g.sample_noise(labels.len(), rng);
    let x = g.net.infer(&g.input(&a, &z)?)?;
    Ok((x, labels))
}

/// Caches from [`embed`] needed by [`embed_backward`].
#[derive(Clone, Debug)]
pub struct EmbedCache {
    pub e: MlpCache,
    pub p: MlpCache,
    pub z_raw: Matrix,
}

/// `h = E(x)` and `z = normalize(H(h))`.
pub fn embed(
    e: &EmbeddingNet,
    proj: &ProjectionNet,
    x: &Matrix,
) -> Result<(Matrix, Matrix, EmbedCache)> {
    let (h, e_cache) = e.net.forward(x)?;
    let (z_raw, p_cache) = proj.net.forward(&h)?;
    let z = l2_normalize_rows(&z_raw)?;
    Ok((
        h,
        z,
        EmbedCache {
            e: e_cache,
            p: p_cache,
            z_raw,
        },
    ))
}

/// Backward through [`embed`]. Accumulates E and H parameter gradients and
/// returns the gradient with respect to `x`.
pub fn embed_backward(
    e: &mut EmbeddingNet,
    proj: &mut ProjectionNet,
    cache: &EmbedCache,
    grad_h: Option<&Matrix>,
    grad_z_unit: Option<&Matrix>,
) -> Result<Matrix> {
    let (rows, d_h) = (cache.z_raw.rows(), e.net.output_dim());
    let mut gh = match grad_h {
        Some(g) => g.clone(),
        None => Matrix::zeros(rows, d_h),
    };
    if let Some(gz) = grad_z_unit {
        let g_raw = l2_normalize_rows_backward(&cache.z_raw, gz)?;
        gh.add_assign(&proj.net.backward(&cache.p, &g_raw)?)?;
    }
    e.net.backward(&cache.e, &gh)
}

/// Relation-net pair batch: row `i·|S| + j` scores `[h_i ; a_j]`.
#[derive(Clone, Debug)]
pub struct RelationCache {
    pub mlp: MlpCache,
    pub batch: usize,
    pub n_classes: usize,
}

/// Score matrix `batch x |S|`, entry `(i, j) = RN([h_i ; a_j])`.
pub fn relation_scores(
    rn: &RelationNet,
    h: &Matrix,
    attrs: &Matrix,
) -> Result<(Matrix, RelationCache)> {
    if h.cols() != rn.d_h || attrs.cols() != rn.attr_dim {
        return Err(Error::Dimension {
            op: "relation_scores",
            left: h.shape(),
            right: attrs.shape(),
        });
    }
    let (b, s) = (h.rows(), attrs.rows());
    let width = rn.d_h + rn.attr_dim;
    let mut pairs = Vec::with_capacity(b * s * width);
    for i in 0..b {
        for j in 0..s {
            pairs.extend_from_slice(h.row(i));
            pairs.extend_from_slice(attrs.row(j));
        }
    }
    let pairs = Matrix::new(b * s, width, pairs)?;
    let (out, mlp) = rn.net.forward(&pairs)?;
    Ok((
        Matrix::new(b, s, out.into_data())?,
        RelationCache {
            mlp,
            batch: b,
            n_classes: s,
        },
    ))
}

/// Backward of [`relation_scores`]: accumulates RN gradients, returns the
/// gradient with respect to `h`. Attributes are fixed inputs.
pub fn relation_scores_backward(
    rn: &mut RelationNet,
    cache: &RelationCache,
    grad_scores: &Matrix,
) -> Result<Matrix> {
    if grad_scores.shape() != (cache.batch, cache.n_classes) {
        return Err(Error::Dimension {
            op: "relation_scores_backward",
            left: grad_scores.shape(),
            right: (cache.batch, cache.n_classes),
        });
    }
    let flat = Matrix::new(cache.batch * cache.n_classes, 1, grad_scores.data().to_vec())?;
    let g_pairs = rn.net.backward(&cache.mlp, &flat)?;
    let mut gh = Matrix::zeros(cache.batch, rn.d_h);
    for i in 0..cache.batch {
        let out = gh.row_mut(i);
        for j in 0..cache.n_classes {
            let src = &g_pairs.row(i * cache.n_classes + j)[..rn.d_h];
            for (o, &v) in out.iter_mut().zip(src) {
                *o += v;
            }
        }
    }
    Ok(gh)
}

/// Every trainable component of the method.
#[derive(Clone, Debug, PartialEq)]
pub struct Models {
    pub dims: ModelDims,
    pub generator: Generator,
    pub discriminator: Discriminator,
    pub embedding: EmbeddingNet,
    pub projection: ProjectionNet,
    pub relation: RelationNet,
    pub prototypes: PrototypeBank,
}

impl Models {
    pub fn init(dims: ModelDims, seen_classes: &[usize], rng: &mut Rng) -> Result<Self> {
        Ok(Self {
            generator: Generator::init(&dims, rng)?,
            discriminator: Discriminator::init(&dims, rng)?,
            embedding: EmbeddingNet::init(&dims, rng)?,
            projection: ProjectionNet::init(&dims, rng)?,
            relation: RelationNet::init(&dims, rng)?,
            prototypes: PrototypeBank::init(seen_classes, dims.d_z, rng)?,
            dims,
        })
    }

    /// All parameters with stable names, in checkpoint order.
    pub fn named_params(&self) -> Vec<(String, &Param)> {
        let mut out: Vec<(String, &Param)> = Vec::new();
        out.extend(self.generator.net.named_params("G"));
        out.extend(self.discriminator.net.named_params("D"));
        out.extend(self.embedding.net.named_params("E"));
        out.extend(self.projection.net.named_params("H"));
        out.extend(self.relation.net.named_params("RN"));
        out.push(("P.protos".to_string(), &self.prototypes.protos));
        out
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Param)> {
        let mut out: Vec<(String, &mut Param)> = Vec::new();
        out.extend(self.generator.net.named_params_mut("G"));
        out.extend(self.discriminator.net.named_params_mut("D"));
        out.extend(self.embedding.net.named_params_mut("E"));
        out.extend(self.projection.net.named_params_mut("H"));
        out.extend(self.relation.net.named_params_mut("RN"));
        out.push(("P.protos".to_string(), &mut self.prototypes.protos));
        out
    }
}

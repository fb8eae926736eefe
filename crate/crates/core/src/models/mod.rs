//! The generator, critic, embedding, projection and relation networks, and
//! the learnable prototype bank.

mod mlp;
mod nets;
mod prototypes;

pub use mlp::{Activation, Linear, Mlp, MlpCache, MlpSpec, INIT_STD};
pub use nets::{
    embed, embed_backward, generate_features, relation_scores, relation_scores_backward,
    Discriminator, EmbedCache, EmbeddingNet, Generator, ModelDims, Models, ProjectionNet,
    RelationCache, RelationNet,
};
pub use prototypes::PrototypeBank;

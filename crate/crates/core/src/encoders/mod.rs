//! Miniature two-tower model: a convolutional-embedding windowed-attention
//! image tower, a small transformer text tower, linear projections into a
//! shared space, and the 2D→3D inflation used for video.

pub(crate) mod blocks;
pub mod params;
pub mod tower;
pub mod video;
pub mod vocab;

pub use blocks::VarMap;
pub use params::{no_decay_names, params_digest, ImageTowerConfig, ModelConfig, TextTowerConfig, TwoTowerParams};
pub use tower::{
    bind, collect_grads, encode_image, encode_images, encode_in_chunks, encode_text, encode_texts,
    image_embedding_graph, text_embedding_graph, ForwardOptions,
};
pub use video::{
    build_video_tower, constant_clip, encode_videos, inflate_conv_2d_to_3d, inflate_positional_table, VideoTowerParams,
};
pub use vocab::{tokenize, Vocabulary, BOS, EOS, PAD, UNK};

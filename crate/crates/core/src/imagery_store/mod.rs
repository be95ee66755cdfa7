//! Loading and persisting the pipeline's inputs: district polygons, tile
//! images, annotator labels, tile embeddings and demographics tables.

mod demographics;
mod embeddings;
mod geojson;
mod images;
mod labels;

pub use demographics::{load_demographics, read_demographics, write_demographics, DemographicsRow};
pub use embeddings::{
    check_references, load_embeddings, read_embeddings_bin, read_embeddings_csv, write_embeddings_bin,
    write_embeddings_csv, EmbeddingRecord, EMBEDDING_MAGIC,
};
pub use geojson::{districts_to_geojson, load_districts, parse_districts};
pub use images::{
    decode_png, encode_png, load_tile_image, normalize_image, parse_stem, save_tile_image, tile_image_path,
    ImageIndex, NormStats, RawRaster, TileImage,
};
pub use labels::{
    load_labels, parse_class, read_labels, soft_label, write_votes, SoftLabel, VoteRow, CLASS_NAMES, RURAL,
    UNINHABITED, URBAN,
};

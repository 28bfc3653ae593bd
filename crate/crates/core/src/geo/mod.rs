//! Road network and POI data, map matching, text embeddings and the two
//! semantic view encoders.

pub mod matching;
pub mod network;
pub mod text;
pub mod views;

pub use matching::{map_match, nearest_edge, nearest_edge_brute, nearest_poi, nearest_poi_at, nearest_poi_brute};
pub use network::{Edge, Node, Poi, PoiSet, RoadNetwork};
pub use text::{FileTable, HashStub, RemoteProvider, TextEmbeddingProvider};
pub use views::{EntityTexts, ViewDims, ViewEncoder};

//! Road and POI view encoders: entity embeddings, positional encoding,
//! Transformer layers and masked mean pooling.

use super::text::TextEmbeddingProvider;
use crate::error::{Error, Result};
use crate::tensor::kernels::SeqLayout;
use crate::tensor::nn::{sinusoidal_positions, Embedding, LayerNorm, Linear, TransformerLayer};
use crate::tensor::rng::Rng;
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

/// Frozen text vectors of all entities of one kind, `entities × dim`.
#[derive(Clone, Debug, PartialEq)]
pub struct EntityTexts<T> {
    pub table: Tensor<T>,
}

impl<T: Scalar> EntityTexts<T> {
    /// Embeds `descs[i]` under key `{kind}/{i}`.
    pub fn build(provider: &dyn TextEmbeddingProvider, kind: &str, descs: &[&str]) -> Result<Self> {
        let items: Vec<(String, String)> = descs
            .iter()
            .enumerate()
            .map(|(i, d)| (format!("{kind}/{i}"), d.to_string()))
            .collect();
        let vecs = provider.embed_many(&items)?;
        let dim = provider.dim();
        let mut data = Vec::with_capacity(vecs.len() * dim);
        for v in &vecs {
            if v.len() != dim {
                return Err(Error::Format(format!("text vector has {} values, expected {dim}", v.len())));
            }
            data.extend(v.iter().map(|&x| T::of(f64::from(x))));
        }
        Ok(Self {
            table: Tensor::new([vecs.len(), dim], data)?,
        })
    }

    pub fn dim(&self) -> usize {
        self.table.cols()
    }

    pub fn len(&self) -> usize {
        self.table.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn rows(&self, ids: &[usize]) -> Result<Tensor<T>> {
        let d = self.dim();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= self.len() {
                return Err(Error::Index {
                    what: "entity text table",
                    index: i,
                    len: self.len(),
                });
            }
            out.extend_from_slice(self.table.row(i));
        }
        Tensor::new([ids.len(), d], out)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ViewDims {
    pub entities: usize,
    pub text_dim: usize,
    pub embed: usize,
    pub heads: usize,
    pub layers: usize,
}

/// Transformer encoder over a sequence of road segments or POIs.
#[derive(Clone, Debug)]
pub struct ViewEncoder {
    pub dims: ViewDims,
    pub index: Embedding,
    pub index_proj: Linear,
    pub text_proj: Linear,
    pub layers: Vec<TransformerLayer>,
    pub norm: LayerNorm,
}

impl ViewEncoder {
    /// All parameter names start with `{prefix}.`.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, rng: &mut Rng, prefix: &str, dims: ViewDims) -> Result<Self> {
        if dims.entities == 0 {
            return Err(Error::Config(format!("{prefix} view has no entities")));
        }
        let e = dims.embed;
        let index = Embedding::new(store, rng, &format!("{prefix}.index"), dims.entities, e)?;
        let index_proj = Linear::new(store, rng, &format!("{prefix}.index_proj"), e, e, true)?;
        let text_proj = Linear::new(store, rng, &format!("{prefix}.text_proj"), dims.text_dim, e, false)?;
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            layers.push(TransformerLayer::new(store, rng, &format!("{prefix}.layer{l}"), e, dims.heads, 4 * e)?);
        }
        let norm = LayerNorm::new(store, &format!("{prefix}.norm"), e)?;
        Ok(Self {
            dims,
            index,
            index_proj,
            text_proj,
            layers,
            norm,
        })
    }

    /// `Linear(IndexEmbed(id)) + Linear(TextEmbed(desc))` per id, `n × E`.
    pub fn entity_embedding<T: Scalar>(&self, tape: &Tape<'_, T>, ids: &[usize], texts: &EntityTexts<T>) -> Result<Var> {
        let idx = self.index.forward(tape, ids)?;
        let idx = self.index_proj.forward(tape, idx)?;
        let txt = tape.constant(texts.rows(ids)?);
        let txt = self.text_proj.forward(tape, txt)?;
        tape.add(idx, txt)
    }

    /// One view vector per sequence, `batch × E`. Sequences are right-padded
    /// internally with entity 0.
    pub fn forward<T: Scalar>(&self, tape: &Tape<'_, T>, seqs: &[&[usize]], texts: &EntityTexts<T>) -> Result<Var> {
        if seqs.is_empty() || seqs.iter().any(|s| s.is_empty()) {
            return Err(Error::Input("view sequences must be non-empty".into()));
        }
        let layout = SeqLayout::padded(seqs.iter().map(|s| s.len()).collect());
        let n = layout.seq_len;
        let mut ids = Vec::with_capacity(layout.rows());
        for s in seqs {
            ids.extend_from_slice(s);
            ids.extend(std::iter::repeat_n(0, n - s.len()));
        }
        let x = self.entity_embedding(tape, &ids, texts)?;
        let pos = sinusoidal_positions::<T>(n, self.dims.embed);
        let mut pos_all = Vec::with_capacity(layout.rows() * self.dims.embed);
        for _ in 0..seqs.len() {
            pos_all.extend_from_slice(pos.data());
        }
        let pos = tape.constant(Tensor::new([layout.rows(), self.dims.embed], pos_all)?);
        let mut h = tape.add(x, pos)?;
        for layer in &self.layers {
            h = layer.forward(tape, h, &layout)?;
        }
        let h = self.norm.forward(tape, h)?;
        tape.mean_pool(h, &layout)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geo::text::HashStub;
    use crate::tensor::ParamGrad;

    fn setup() -> (ParamStore<f64>, ViewEncoder, EntityTexts<f64>) {
        let mut store = ParamStore::new();
        let dims = ViewDims {
            entities: 10,
            text_dim: 8,
            embed: 8,
            heads: 2,
            layers: 2,
        };
        let enc = ViewEncoder::new(&mut store, &mut Rng::new(1, "view"), "road", dims).unwrap();
        let descs: Vec<String> = (0..10).map(|i| format!("street {i}")).collect();
        let refs: Vec<&str> = descs.iter().map(|s| s.as_str()).collect();
        let texts = EntityTexts::build(&HashStub { dim: 8 }, "road", &refs).unwrap();
        (store, enc, texts)
    }

    #[test]
    fn zero_text_projection_leaves_index_term() {
        let (mut store, enc, texts) = setup();
        store.set(enc.text_proj.weight, Tensor::zeros([8, 8])).unwrap();
        let tape = Tape::inference(&store);
        let e = enc.entity_embedding(&tape, &[3], &texts).unwrap();
        let idx = enc.index_proj.forward(&tape, enc.index.forward(&tape, &[3]).unwrap()).unwrap();
        assert_eq!(tape.shape(e), vec![1, 8]);
        assert_eq!(tape.tensor(e), tape.tensor(idx));
    }

    #[test]
    fn entity_gradient_touches_one_row() {
        let (store, enc, texts) = setup();
        let tape = Tape::new(&store);
        let e = enc.entity_embedding(&tape, &[4], &texts).unwrap();
        let g = tape.backward_scalar(tape.sum_all(e)).unwrap();
        match g.param(enc.index.table).unwrap() {
            ParamGrad::Rows { rows, .. } => assert_eq!(rows.keys().copied().collect::<Vec<_>>(), vec![4]),
            ParamGrad::Dense(d) => {
                let nz: Vec<usize> = (0..10).filter(|r| d[r * 8..(r + 1) * 8].iter().any(|&v| v != 0.0)).collect();
                assert_eq!(nz, vec![4]);
            }
        }
        assert!(matches!(enc.entity_embedding(&tape, &[10], &texts), Err(Error::Index { .. })));
    }

    #[test]
    fn padded_batch_matches_single_and_order_matters() {
        let (store, enc, texts) = setup();
        let seqs: [&[usize]; 3] = [&[1, 2, 3, 4], &[5], &[9, 8, 7]];
        let tape = Tape::inference(&store);
        let batch = tape.tensor(enc.forward(&tape, &seqs, &texts).unwrap());
        for (b, s) in seqs.iter().enumerate() {
            let single = tape.tensor(enc.forward(&tape, &[s], &texts).unwrap());
            for (x, y) in batch.row(b).iter().zip(single.data()) {
                assert!((x - y).abs() <= 1e-5);
            }
            assert!(single.is_finite());
        }
        let rev = tape.tensor(enc.forward(&tape, &[&[4, 3, 2, 1]], &texts).unwrap());
        assert_ne!(rev.data(), batch.row(0));
    }
}

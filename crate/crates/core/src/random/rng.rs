use rand::seq::SliceRandom;
use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

/// Named substreams of one experiment seed. Each maps to a distinct ChaCha
/// stream id, so the sequences never overlap.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stream {
    Init,
    Sampling,
    Shuffle,
    Dropout,
    Split,
    Synthetic,
}

impl Stream {
    pub fn id(self) -> u64 {
        match self {
            Stream::Init => 1,
            Stream::Sampling => 2,
            Stream::Shuffle => 3,
            Stream::Dropout => 4,
            Stream::Split => 5,
            Stream::Synthetic => 6,
        }
    }
}

/// Serializable position of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub key: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// ChaCha8 generator. The 64-bit seed expands to a 256-bit key; streams are
/// ChaCha nonces, so output is identical on every platform.
#[derive(Clone, Debug)]
pub struct Rng {
    inner: ChaCha8Rng,
}

impl Rng {
    pub fn new(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn for_stream(seed: u64, stream: Stream) -> Self {
        Self::new(seed).substream(stream.id())
    }

    /// A fresh generator on the same key and stream `id`, positioned at 0.
    pub fn substream(&self, id: u64) -> Self {
        let mut inner = ChaCha8Rng::from_seed(self.inner.get_seed());
        inner.set_stream(id);
        Rng { inner }
    }

    pub fn state(&self) -> RngState {
        RngState {
            key: self.inner.get_seed(),
            stream: self.inner.get_stream(),
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.key);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Rng { inner }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    /// Uniform on the open interval `(−½, ½)`.
    pub fn uniform_open_half(&mut self) -> f64 {
        loop {
            let u = self.uniform() - 0.5;
            if u > -0.5 {
                return u;
            }
        }
    }

    pub fn normal(&mut self, mean: f64, std_dev: f64) -> f64 {
        let z: f64 = StandardNormal.sample(&mut self.inner);
        mean + std_dev * z
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        items.shuffle(&mut self.inner);
    }
}

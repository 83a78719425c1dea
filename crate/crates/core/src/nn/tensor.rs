/// A `(channels, frames, freq)` feature map stored frame-major, so one
/// frame (`channels * freq` values, channel-major within) is contiguous.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    frames: usize,
    freq: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, frames: usize, freq: usize) -> Self {
        Self {
            channels,
            frames,
            freq,
            data: vec![0.0; channels * frames * freq],
        }
    }

    /// Panics if `data` does not hold `channels * frames * freq` values.
    pub fn from_vec(channels: usize, frames: usize, freq: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * frames * freq, "feature map size");
        Self {
            channels,
            frames,
            freq,
            data,
        }
    }

    /// Build from a closure over `(channel, frame, freq)`.
    pub fn from_fn(
        channels: usize,
        frames: usize,
        freq: usize,
        mut f: impl FnMut(usize, usize, usize) -> f32,
    ) -> Self {
        let mut map = Self::zeros(channels, frames, freq);
        for l in 0..frames {
            for c in 0..channels {
                for k in 0..freq {
                    map.set(c, l, k, f(c, l, k));
                }
            }
        }
        map
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn freq(&self) -> usize {
        self.freq
    }

    pub fn frame_len(&self) -> usize {
        self.channels * self.freq
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    fn index(&self, c: usize, l: usize, k: usize) -> usize {
        (l * self.channels + c) * self.freq + k
    }

    #[inline]
    pub fn get(&self, c: usize, l: usize, k: usize) -> f32 {
        self.data[self.index(c, l, k)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, l: usize, k: usize, v: f32) {
        let i = self.index(c, l, k);
        self.data[i] = v;
    }

    pub fn frame(&self, l: usize) -> &[f32] {
        let n = self.frame_len();
        &self.data[l * n..(l + 1) * n]
    }

    pub fn frame_mut(&mut self, l: usize) -> &mut [f32] {
        let n = self.frame_len();
        &mut self.data[l * n..(l + 1) * n]
    }

    /// Row of one channel within one frame.
    pub fn row(&self, c: usize, l: usize) -> &[f32] {
        let i = self.index(c, l, 0);
        &self.data[i..i + self.freq]
    }

    pub fn row_mut(&mut self, c: usize, l: usize) -> &mut [f32] {
        let i = self.index(c, l, 0);
        let f = self.freq;
        &mut self.data[i..i + f]
    }

    /// Same values viewed with a different `(channels, freq)` split per frame.
    pub fn reshape_frames(mut self, channels: usize, freq: usize) -> Self {
        assert_eq!(
            channels * freq,
            self.frame_len(),
            "reshape keeps frame size"
        );
        self.channels = channels;
        self.freq = freq;
        self
    }

    /// Stack channels of `self` followed by those of `other`.
    pub fn concat_channels(&self, other: &FeatureMap) -> FeatureMap {
        assert_eq!(self.frames, other.frames, "concat frame count");
        assert_eq!(self.freq, other.freq, "concat freq size");
        let mut data = Vec::with_capacity(self.data.len() + other.data.len());
        for l in 0..self.frames {
            data.extend_from_slice(self.frame(l));
            data.extend_from_slice(other.frame(l));
        }
        FeatureMap::from_vec(self.channels + other.channels, self.frames, self.freq, data)
    }

    /// Channels `[start, start + count)` as a new map.
    pub fn select_channels(&self, start: usize, count: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(count, self.frames, self.freq);
        for l in 0..self.frames {
            for c in 0..count {
                out.row_mut(c, l).copy_from_slice(self.row(start + c, l));
            }
        }
        out
    }

    /// Append the frames of `other` (same channel/freq layout).
    pub fn append_frames(&mut self, other: &FeatureMap) {
        assert_eq!(self.frame_len(), other.frame_len(), "append frame size");
        self.data.extend_from_slice(&other.data);
        self.frames += other.frames;
    }

    /// The last `n` frames (fewer if the map is shorter).
    pub fn last_frames(&self, n: usize) -> FeatureMap {
        let n = n.min(self.frames);
        let start = (self.frames - n) * self.frame_len();
        FeatureMap::from_vec(self.channels, n, self.freq, self.data[start..].to_vec())
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.data.len(), other.data.len(), "add shape");
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }
}

//! Shoebox image-method impulse responses.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use super::RoomError;

pub const SPEED_OF_SOUND: f64 = 343.0;

/// Wall reflection coefficients in the order x=0, x=Lx, y=0, y=Ly, z=0, z=Lz.
pub type Reflections = [f64; 6];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Absorption {
    Reflection(Reflections),
    /// Uniform absorption giving this reverberation time under Sabine's formula.
    T60(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Placement {
    /// Each image lands on the nearest sample.
    Nearest,
    /// Hann-windowed sinc spanning `2 * half_width` samples.
    Sinc { half_width: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoomSpec {
    pub dims: [f64; 3],
    pub absorption: Absorption,
    pub source: [f64; 3],
    pub mic: [f64; 3],
    /// Highest reflection order; `None` keeps every image inside `length`.
    pub max_order: Option<usize>,
    /// RIR length in samples.
    pub length: usize,
    pub c: f64,
    pub fs: f64,
    pub placement: Placement,
    /// Early window after the direct-path arrival, in samples.
    pub early_samples: usize,
}

impl RoomSpec {
    pub fn new(dims: [f64; 3], absorption: Absorption, source: [f64; 3], mic: [f64; 3]) -> Self {
        Self {
            dims,
            absorption,
            source,
            mic,
            max_order: None,
            length: 4096,
            c: SPEED_OF_SOUND,
            fs: 16_000.0,
            placement: Placement::Nearest,
            early_samples: 1600,
        }
    }

    pub fn volume(&self) -> f64 {
        self.dims.iter().product()
    }

    pub fn surface(&self) -> f64 {
        let [x, y, z] = self.dims;
        2.0 * (x * y + x * z + y * z)
    }

    /// Sabine reverberation time of the room's absorption.
    pub fn sabine_t60(&self) -> f64 {
        let [x, y, z] = self.dims;
        let areas = [y * z, y * z, x * z, x * z, x * y, x * y];
        let a: f64 = areas
            .iter()
            .zip(self.reflections())
            .map(|(s, b)| s * (1.0 - b * b))
            .sum();
        24.0 * 10f64.ln() * self.volume() / (self.c * a)
    }

    pub fn reflections(&self) -> Reflections {
        match self.absorption {
            Absorption::Reflection(r) => r,
            Absorption::T60(t60) => {
                let alpha = 24.0 * 10f64.ln() * self.volume() / (self.c * self.surface() * t60);
                [(1.0 - alpha.min(1.0)).sqrt(); 6]
            }
        }
    }

    pub fn validate(&self) -> Result<(), RoomError> {
        let bad = |m: String| Err(RoomError::InvalidRoom(m));
        if self.dims.iter().any(|&d| !(d > 0.0 && d.is_finite())) {
            return bad(format!("room dimensions {:?} must be positive", self.dims));
        }
        for (name, p) in [("source", self.source), ("mic", self.mic)] {
            if p.iter().zip(&self.dims).any(|(&v, &d)| !(v > 0.0 && v < d)) {
                return bad(format!("{name} {p:?} is not strictly inside the room"));
            }
        }
        if self.source == self.mic {
            return Err(RoomError::Coincident);
        }
        match self.absorption {
            Absorption::T60(t) if !(t > 0.0 && t.is_finite()) => {
                return bad(format!("T60 {t} must be positive"))
            }
            Absorption::Reflection(r) if r.iter().any(|b| !(0.0..=1.0).contains(b)) => {
                return bad("reflection coefficients must lie in [0, 1]".into())
            }
            _ => {}
        }
        if !(self.c > 0.0 && self.fs > 0.0) || self.length == 0 {
            return bad("speed of sound, sample rate and length must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rir {
    pub taps: Vec<f64>,
    pub direct_delay: usize,
    /// First sample of the late part.
    pub split_point: usize,
}

impl Rir {
    pub fn energy(&self) -> f64 {
        self.taps.iter().map(|t| t * t).sum()
    }
}

fn distance(d: [f64; 3]) -> f64 {
    (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
}

pub fn simulate_rir(room: &RoomSpec) -> Result<Rir, RoomError> {
    room.validate()?;
    let [bx1, bx2, by1, by2, bz1, bz2] = room.reflections();
    let (s, r, dims) = (room.source, room.mic, room.dims);
    let n = room.length;
    let mut taps = vec![0.0; n];
    let samples_per_m = room.fs / room.c;
    let reach = |l: f64| (n as f64 / (2.0 * l * samples_per_m)).ceil() as i64 + 1;
    let order_cap = room.max_order.map(|o| o as i64);
    let lim = |l: f64| order_cap.map_or(reach(l), |o| o.min(reach(l)));
    let (nx, ny, nz) = (lim(dims[0]), lim(dims[1]), lim(dims[2]));

    for mx in -nx..=nx {
        for q in 0..2i64 {
            let dx = (1 - 2 * q) as f64 * s[0] + 2.0 * mx as f64 * dims[0] - r[0];
            let ox = (2 * mx - q).abs();
            let gx = bx1.powi((mx - q).abs() as i32) * bx2.powi(mx.abs() as i32);
            for my in -ny..=ny {
                for j in 0..2i64 {
                    let dy = (1 - 2 * j) as f64 * s[1] + 2.0 * my as f64 * dims[1] - r[1];
                    let oy = (2 * my - j).abs();
                    let gy = by1.powi((my - j).abs() as i32) * by2.powi(my.abs() as i32);
                    for mz in -nz..=nz {
                        for k in 0..2i64 {
                            let oz = (2 * mz - k).abs();
                            if order_cap.is_some_and(|o| ox + oy + oz > o) {
                                continue;
                            }
                            let dz = (1 - 2 * k) as f64 * s[2] + 2.0 * mz as f64 * dims[2] - r[2];
                            let gz = bz1.powi((mz - k).abs() as i32) * bz2.powi(mz.abs() as i32);
                            let gain = gx * gy * gz;
                            if gain == 0.0 {
                                continue;
                            }
                            let d = distance([dx, dy, dz]);
                            place(
                                &mut taps,
                                d * samples_per_m,
                                gain / (4.0 * PI * d),
                                room.placement,
                            );
                        }
                    }
                }
            }
        }
    }

    let direct = distance([s[0] - r[0], s[1] - r[1], s[2] - r[2]]);
    let direct_delay = (direct * samples_per_m).round() as usize;
    Ok(Rir {
        taps,
        direct_delay,
        split_point: direct_delay + room.early_samples,
    })
}

fn place(taps: &mut [f64], delay: f64, amp: f64, placement: Placement) {
    match placement {
        Placement::Nearest => {
            let i = delay.round() as usize;
            if i < taps.len() {
                taps[i] += amp;
            }
        }
        Placement::Sinc { half_width } => {
            let hw = half_width as f64;
            let base = delay.floor() as i64;
            for idx in base - half_width as i64 + 1..=base + half_width as i64 {
                if idx < 0 || idx as usize >= taps.len() {
                    continue;
                }
                let x = idx as f64 - delay;
                let w = 0.5 * (1.0 + (PI * x / hw).cos());
                let sinc = if x == 0.0 {
                    1.0
                } else {
                    (PI * x).sin() / (PI * x)
                };
                taps[idx as usize] += amp * w * sinc;
            }
        }
    }
}

/// Split at `rir.split_point` into an early and a late response of the
/// original length; `early + late == rir` exactly.
pub fn split_rir(rir: &Rir) -> (Rir, Rir) {
    let cut = rir.split_point.min(rir.taps.len());
    let mut early = rir.clone();
    let mut late = rir.clone();
    early.taps[cut..].iter_mut().for_each(|t| *t = 0.0);
    late.taps[..cut].iter_mut().for_each(|t| *t = 0.0);
    (early, late)
}

/// Reverberation time from a Schroeder backward-integrated decay, fitted
/// between -5 and -25 dB and extrapolated to 60 dB.
pub fn schroeder_t60(taps: &[f64], fs: f64) -> Option<f64> {
    let mut edc = vec![0.0; taps.len()];
    let mut acc = 0.0;
    for i in (0..taps.len()).rev() {
        acc += taps[i] * taps[i];
        edc[i] = acc;
    }
    let total = edc.first().copied().filter(|&e| e > 0.0)?;
    let db: Vec<f64> = edc.iter().map(|e| 10.0 * (e / total).log10()).collect();
    let start = db.iter().position(|&d| d <= -5.0)?;
    let end = db.iter().position(|&d| d <= -25.0)?;
    if end <= start + 1 {
        return None;
    }
    let n = (end - start) as f64;
    let (mut sx, mut sy, mut sxx, mut sxy) = (0.0, 0.0, 0.0, 0.0);
    for (i, &y) in db.iter().enumerate().take(end).skip(start) {
        let x = i as f64 / fs;
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    let slope = (n * sxy - sx * sy) / (n * sxx - sx * sx);
    (slope < 0.0).then(|| -60.0 / slope)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn room(absorption: Absorption, source: [f64; 3], mic: [f64; 3]) -> RoomSpec {
        RoomSpec::new([5.0, 4.0, 3.0], absorption, source, mic)
    }

    #[test]
    fn anechoic_single_tap() {
        let spec = room(
            Absorption::Reflection([0.0; 6]),
            [1.0, 2.0, 1.5],
            [4.43, 2.0, 1.5],
        );
        let rir = simulate_rir(&spec).unwrap();
        let nz: Vec<usize> = (0..rir.taps.len())
            .filter(|&i| rir.taps[i] != 0.0)
            .collect();
        assert_eq!(nz, vec![160]);
        assert_eq!(rir.direct_delay, 160);
        assert!((rir.taps[160] - 1.0 / (4.0 * PI * 3.43)).abs() < 1e-12);
        let (early, late) = split_rir(&rir);
        assert!(late.taps.iter().all(|&t| t == 0.0));
        assert_eq!(early, rir);
    }

    #[test]
    fn first_order_room_matches_image_list() {
        let b = [0.9, 0.8, 0.7, 0.6, 0.5, 0.4];
        let (s, r, l) = ([1.1, 1.3, 0.7], [3.2, 2.9, 1.9], [5.0, 4.0, 3.0]);
        let mut spec = room(Absorption::Reflection(b), s, r);
        spec.max_order = Some(1);
        let rir = simulate_rir(&spec).unwrap();

        let images: [([f64; 3], f64); 7] = [
            (s, 1.0),
            ([-s[0], s[1], s[2]], b[0]),
            ([2.0 * l[0] + -s[0], s[1], s[2]], b[1]),
            ([s[0], -s[1], s[2]], b[2]),
            ([s[0], 2.0 * l[1] + -s[1], s[2]], b[3]),
            ([s[0], s[1], -s[2]], b[4]),
            ([s[0], s[1], 2.0 * l[2] + -s[2]], b[5]),
        ];
        let mut expect = vec![0.0; spec.length];
        let mut seen = std::collections::HashSet::new();
        for (img, beta) in images {
            let d = distance([img[0] - r[0], img[1] - r[1], img[2] - r[2]]);
            let idx = (d * 16_000.0 / 343.0).round() as usize;
            assert!(seen.insert(idx), "image delays must be distinct");
            expect[idx] = beta / (4.0 * PI * d);
        }
        assert_eq!(rir.taps, expect);
    }

    #[test]
    fn reciprocity() {
        let a = simulate_rir(&room(
            Absorption::T60(0.3),
            [1.0, 1.5, 1.2],
            [3.5, 2.2, 2.0],
        ))
        .unwrap();
        let b = simulate_rir(&room(
            Absorption::T60(0.3),
            [3.5, 2.2, 2.0],
            [1.0, 1.5, 1.2],
        ))
        .unwrap();
        for (x, y) in a.taps.iter().zip(&b.taps) {
            assert!((x - y).abs() <= 1e-12 * x.abs().max(1e-6));
        }
    }

    #[test]
    fn split_is_exact_partition() {
        let rir = simulate_rir(&room(
            Absorption::T60(0.5),
            [1.0, 1.0, 1.0],
            [4.0, 3.0, 2.0],
        ))
        .unwrap();
        let (e, l) = split_rir(&rir);
        assert!(rir.split_point > rir.direct_delay);
        for i in 0..rir.taps.len() {
            assert_eq!(e.taps[i] + l.taps[i], rir.taps[i]);
        }
        assert!((e.energy() + l.energy() - rir.energy()).abs() <= 1e-15 * rir.energy());
    }

    #[test]
    fn invalid_rooms() {
        let spec = room(Absorption::T60(0.3), [1.0, 1.0, 1.0], [1.0, 1.0, 1.0]);
        assert!(matches!(simulate_rir(&spec), Err(RoomError::Coincident)));
        let spec = room(Absorption::T60(0.3), [6.0, 1.0, 1.0], [1.0, 2.0, 1.0]);
        assert!(matches!(
            simulate_rir(&spec),
            Err(RoomError::InvalidRoom(_))
        ));
        let spec = room(Absorption::T60(-1.0), [1.0, 1.0, 1.0], [2.0, 2.0, 1.0]);
        assert!(simulate_rir(&spec).is_err());
    }

    #[test]
    fn sinc_placement_preserves_direct_path_peak() {
        let mut spec = room(
            Absorption::Reflection([0.0; 6]),
            [1.0, 2.0, 1.5],
            [3.0, 2.5, 1.5],
        );
        spec.placement = Placement::Sinc { half_width: 32 };
        let rir = simulate_rir(&spec).unwrap();
        let peak = (0..rir.taps.len())
            .max_by(|&a, &b| rir.taps[a].abs().total_cmp(&rir.taps[b].abs()))
            .unwrap();
        assert_eq!(peak, rir.direct_delay);
    }

    #[test]
    fn schroeder_decay_tracks_sabine() {
        for (dims, t60) in [
            ([6.0, 5.0, 3.0], 0.25),
            ([4.0, 3.5, 2.7], 0.15),
            ([8.0, 6.0, 3.2], 0.2),
        ] {
            let mut spec = RoomSpec::new(
                dims,
                Absorption::T60(t60),
                [1.3, 1.1, 1.2],
                [dims[0] - 1.4, dims[1] - 1.2, 1.6],
            );
            spec.length = (2.0 * t60 * spec.fs) as usize;
            let rir = simulate_rir(&spec).unwrap();
            let est = schroeder_t60(&rir.taps, spec.fs).unwrap();
            assert!((est / t60 - 1.0).abs() < 0.2, "{dims:?}: {est} vs {t60}");
        }
    }

    #[test]
    fn sabine_from_t60_round_trips() {
        let spec = room(Absorption::T60(0.45), [1.0, 1.0, 1.0], [2.0, 2.0, 2.0]);
        assert!((spec.sabine_t60() - 0.45).abs() < 1e-12);
    }
}

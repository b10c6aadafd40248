//! Packing four consecutive low-resolution frames into one image of twice
//! the height and width, and the exact inverse.

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Patch edge for [`StitchScheme::Patch`].
pub const PATCH: usize = 8;

/// Planar RGB image stored as a `[3, height, width]` tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameImage {
    t: Tensor,
}

impl FrameImage {
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        Self::from_tensor(Tensor::new(&[3, height, width], data)?)
    }

    pub fn filled(height: usize, width: usize, value: f32) -> Self {
        Self {
            t: Tensor::full(&[3, height, width], value),
        }
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        if t.rank() != 3 || t.shape()[0] != 3 {
            return Err(Error::Shape {
                op: "frame_image",
                left: t.shape().to_vec(),
                right: vec![3],
            });
        }
        if !t.is_finite() {
            return Err(Error::InvalidArgument("frame contains non-finite values".into()));
        }
        Ok(Self { t })
    }

    pub fn height(&self) -> usize {
        self.t.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.t.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.t
    }

    pub fn into_tensor(self) -> Tensor {
        self.t
    }

    pub fn data(&self) -> &[f32] {
        self.t.data()
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.t.data()[(c * self.height() + y) * self.width() + x]
    }

    pub fn clamp01(&self) -> Self {
        Self {
            t: self.t.map(|v| v.clamp(0.0, 1.0)),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StitchScheme {
    Quadrant = 0,
    Patch = 1,
    InterleaveA = 2,
    InterleaveB = 3,
}

impl StitchScheme {
    pub const ALL: [StitchScheme; 4] = [Self::Quadrant, Self::Patch, Self::InterleaveA, Self::InterleaveB];

    pub fn code(self) -> u8 {
        self as u8
    }

    pub fn from_code(code: u8) -> Result<Self> {
        Self::ALL
            .get(code as usize)
            .copied()
            .ok_or_else(|| Error::Malformed(format!("stitch code {code} exceeds two bits")))
    }

    pub fn supports(self, h: usize, w: usize) -> bool {
        match self {
            Self::Patch => h % PATCH == 0 && w % PATCH == 0,
            _ => true,
        }
    }

    /// Stitched pixel holding pixel `(i, j)` of frame `f`, for `h × w` frames.
    pub fn place(self, f: usize, i: usize, j: usize, h: usize, w: usize) -> (usize, usize) {
        match self {
            Self::Quadrant => ((f / 2) * h + i, (f % 2) * w + j),
            Self::Patch => {
                let per_row = w / PATCH;
                let p = (i / PATCH) * per_row + j / PATCH;
                let q = 4 * p + f;
                let out_row = 2 * per_row;
                ((q / out_row) * PATCH + i % PATCH, (q % out_row) * PATCH + j % PATCH)
            }
            Self::InterleaveA => (2 * i + f / 2, 2 * j + f % 2),
            Self::InterleaveB => (2 * i + f % 2, 2 * j + f / 2),
        }
    }
}

fn check_stitch_geometry(scheme: StitchScheme, h: usize, w: usize) -> Result<()> {
    if !scheme.supports(h, w) {
        return Err(Error::InvalidArgument(format!(
            "{scheme:?} needs frame sides divisible by {PATCH}, got {h}x{w}"
        )));
    }
    Ok(())
}

/// For every element of the four unstitched frames laid out as
/// `[4 · channels, h, w]`, the flat index it reads in a `[channels, 2h, 2w]`
/// stitched tensor.
pub fn unstitch_index(scheme: StitchScheme, channels: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    check_stitch_geometry(scheme, h, w)?;
    let (sh, sw) = (2 * h, 2 * w);
    let mut index = Vec::with_capacity(4 * channels * h * w);
    for f in 0..4 {
        for c in 0..channels {
            for i in 0..h {
                for j in 0..w {
                    let (y, x) = scheme.place(f, i, j, h, w);
                    index.push((c * sh + y) * sw + x);
                }
            }
        }
    }
    Ok(index)
}

/// For every element of a `[channels, 2h, 2w]` stitched tensor, the flat
/// index it reads in the `[4 · channels, h, w]` frame stack.
pub fn stitch_index(scheme: StitchScheme, channels: usize, h: usize, w: usize) -> Result<Vec<usize>> {
    let inv = unstitch_index(scheme, channels, h, w)?;
    let mut index = vec![0; inv.len()];
    for (src, &dst) in inv.iter().enumerate() {
        index[dst] = src;
    }
    Ok(index)
}

pub fn stitch(frames: &[FrameImage; 4], scheme: StitchScheme) -> Result<FrameImage> {
    let (h, w) = (frames[0].height(), frames[0].width());
    for f in &frames[1..] {
        if (f.height(), f.width()) != (h, w) {
            return Err(Error::Shape {
                op: "stitch",
                left: frames[0].tensor().shape().to_vec(),
                right: f.tensor().shape().to_vec(),
            });
        }
    }
    let index = stitch_index(scheme, 3, h, w)?;
    let stack: Vec<f32> = frames.iter().flat_map(|f| f.data().iter().copied()).collect();
    let data = index.iter().map(|&i| stack[i]).collect();
    FrameImage::new(2 * h, 2 * w, data)
}

pub fn unstitch(img: &FrameImage, scheme: StitchScheme) -> Result<[FrameImage; 4]> {
    let (sh, sw) = (img.height(), img.width());
    if sh % 2 != 0 || sw % 2 != 0 {
        return Err(Error::InvalidArgument(format!("cannot unstitch odd-sized image {sh}x{sw}")));
    }
    let (h, w) = (sh / 2, sw / 2);
    let index = unstitch_index(scheme, 3, h, w)?;
    let n = 3 * h * w;
    let mut frames = index.chunks(n).map(|chunk| {
        let data = chunk.iter().map(|&i| img.data()[i]).collect();
        FrameImage::new(h, w, data)
    });
    Ok([
        frames.next().unwrap()?,
        frames.next().unwrap()?,
        frames.next().unwrap()?,
        frames.next().unwrap()?,
    ])
}

/// Mean squared horizontal difference plus mean squared vertical difference.
pub fn gradient_energy(img: &FrameImage) -> f64 {
    let (h, w) = (img.height(), img.width());
    let d = img.data();
    let (mut sx, mut sy) = (0f64, 0f64);
    for c in 0..3 {
        let plane = &d[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let v = plane[y * w + x] as f64;
                if x + 1 < w {
                    let e = plane[y * w + x + 1] as f64 - v;
                    sx += e * e;
                }
                if y + 1 < h {
                    let e = plane[(y + 1) * w + x] as f64 - v;
                    sy += e * e;
                }
            }
        }
    }
    let nx = (3 * h * w.saturating_sub(1)).max(1) as f64;
    let ny = (3 * h.saturating_sub(1) * w).max(1) as f64;
    sx / nx + sy / ny
}

/// Energy of each interleave candidate, in `[InterleaveA, InterleaveB]` order.
pub fn scheme_energies(frames: &[FrameImage; 4]) -> Result<[f64; 2]> {
    Ok([
        gradient_energy(&stitch(frames, StitchScheme::InterleaveA)?),
        gradient_energy(&stitch(frames, StitchScheme::InterleaveB)?),
    ])
}

/// Interleave with the lower gradient energy; ties go to `InterleaveA`.
pub fn select_scheme(frames: &[FrameImage; 4]) -> Result<StitchScheme> {
    let [a, b] = scheme_energies(frames)?;
    Ok(if b < a {
        StitchScheme::InterleaveB
    } else {
        StitchScheme::InterleaveA
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, h: usize, w: usize) -> FrameImage {
        FrameImage::new(h, w, (0..3 * h * w).map(|_| rng.random::<f32>()).collect()).unwrap()
    }

    fn quad(rng: &mut ChaCha8Rng, h: usize, w: usize) -> [FrameImage; 4] {
        std::array::from_fn(|_| random_frame(rng, h, w))
    }

    #[test]
    fn equal_frames_interleave_is_nearest_upscale() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let f = random_frame(&mut rng, 4, 6);
        let s = stitch(&[f.clone(), f.clone(), f.clone(), f.clone()], StitchScheme::InterleaveA).unwrap();
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..12 {
                    assert_eq!(s.get(c, y, x), f.get(c, y / 2, x / 2));
                }
            }
        }
    }

    #[test]
    fn equal_frames_quadrant_is_tiling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = random_frame(&mut rng, 3, 5);
        let s = stitch(&[f.clone(), f.clone(), f.clone(), f.clone()], StitchScheme::Quadrant).unwrap();
        for c in 0..3 {
            for y in 0..6 {
                for x in 0..10 {
                    assert_eq!(s.get(c, y, x), f.get(c, y % 3, x % 5));
                }
            }
        }
    }

    #[test]
    fn placement_definitions() {
        let (h, w) = (16, 16);
        assert_eq!(StitchScheme::InterleaveA.place(1, 3, 4, h, w), (6, 9));
        assert_eq!(StitchScheme::InterleaveB.place(1, 3, 4, h, w), (7, 8));
        assert_eq!(StitchScheme::Quadrant.place(3, 1, 2, h, w), (17, 18));
        // patches of frames 0..3 run along the first output patch row
        for f in 0..4 {
            assert_eq!(StitchScheme::Patch.place(f, 0, 0, h, w), (0, f * 8));
        }
        // second patch of frame 0 sits after the first four
        assert_eq!(StitchScheme::Patch.place(0, 0, 8, h, w), (8, 0));
    }

    #[test]
    fn roundtrips_all_schemes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scheme in StitchScheme::ALL {
            let frames = quad(&mut rng, 16, 24);
            let s = stitch(&frames, scheme).unwrap();
            assert_eq!(unstitch(&s, scheme).unwrap(), frames);
            let img = random_frame(&mut rng, 32, 48);
            let back = stitch(&unstitch(&img, scheme).unwrap(), scheme).unwrap();
            assert_eq!(back, img);
        }
    }

    #[test]
    fn constant_image_unstitches_to_constants() {
        let img = FrameImage::filled(16, 16, 0.25);
        for scheme in StitchScheme::ALL {
            for f in unstitch(&img, scheme).unwrap() {
                assert_eq!(f, FrameImage::filled(8, 8, 0.25));
            }
        }
    }

    #[test]
    fn errors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut frames = quad(&mut rng, 4, 4);
        frames[2] = random_frame(&mut rng, 4, 6);
        assert!(stitch(&frames, StitchScheme::InterleaveA).is_err());
        assert!(unstitch(&FrameImage::filled(5, 4, 0.0), StitchScheme::InterleaveA).is_err());
        assert!(stitch(&quad(&mut rng, 4, 4), StitchScheme::Patch).is_err());
        assert!(StitchScheme::from_code(4).is_err());
    }

    #[test]
    fn identical_frames_select_a() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = random_frame(&mut rng, 8, 8);
        let frames = [f.clone(), f.clone(), f.clone(), f];
        assert_eq!(select_scheme(&frames).unwrap(), StitchScheme::InterleaveA);
    }

    fn shifted(shift_per_frame: (usize, usize)) -> [FrameImage; 4] {
        let (h, w) = (16, 16);
        std::array::from_fn(|f| {
            let mut data = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                for y in 0..h {
                    for x in 0..w {
                        let xx = x + f * shift_per_frame.1;
                        let yy = y + f * shift_per_frame.0;
                        let v = ((xx as f32 * 0.9 + c as f32).sin() * (yy as f32 * 0.7).cos() + 1.0) / 2.0;
                        data.push(v);
                    }
                }
            }
            FrameImage::new(h, w, data).unwrap()
        })
    }

    #[test]
    fn moving_content_selection_matches_energies() {
        for shift in [(0, 1), (1, 0), (1, 1), (0, 2)] {
            let frames = shifted(shift);
            let [a, b] = scheme_energies(&frames).unwrap();
            let brute = if b < a { StitchScheme::InterleaveB } else { StitchScheme::InterleaveA };
            assert_eq!(select_scheme(&frames).unwrap(), brute, "shift {shift:?}");
        }
    }

    #[test]
    fn selection_matches_brute_force_on_random_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let frames = quad(&mut rng, 8, 8);
            let ea = gradient_energy(&stitch(&frames, StitchScheme::InterleaveA).unwrap());
            let eb = gradient_energy(&stitch(&frames, StitchScheme::InterleaveB).unwrap());
            let want = if eb < ea { StitchScheme::InterleaveB } else { StitchScheme::InterleaveA };
            assert_eq!(select_scheme(&frames).unwrap(), want);
        }
    }
}

//! Procedural synthetic pedestrian dataset.
//!
//! Each identity is a deterministic attribute bundle (clothing colors, body
//! proportions, an optional accessory) rendered as a blocky figure; each
//! camera applies a deterministic tint, brightness shift, crop jitter and
//! noise level. The identity signal lives in the foreground attributes, the
//! camera gap in the global distortions, so cross-camera re-identification
//! is learnable but not trivial.
//!
//! Storage is a dependency-free binary format per image (magic `RIMG`,
//! little-endian u32 height/width/channels, u8 RGB payload) plus a UTF-8
//! `index.csv` with one `path,identity,camera,split` row per image.

use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::rng::{stream, StreamTag};

pub const RIMG_MAGIC: &[u8; 4] = b"RIMG";
pub const INDEX_FILE: &str = "index.csv";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Query,
    Gallery,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Split::Train => write!(f, "train"),
            Split::Query => write!(f, "query"),
            Split::Gallery => write!(f, "gallery"),
        }
    }
}

impl Split {
    fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "query" => Ok(Split::Query),
            "gallery" => Ok(Split::Gallery),
            other => Err(Error::Data(format!("unknown split tag `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct IndexRecord {
    pub path: String,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

/// One decoded image with its metadata joined from the index.
pub struct ImageSample {
    /// H×W×3 row-major values in [0, 1].
    pub pixels: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub identity: u32,
    pub camera: u32,
    pub split: Split,
}

// ── deterministic appearance profiles ────────────────────────────────

#[derive(Clone, Debug)]
pub struct IdentityProfile {
    pub identity: u32,
    pub torso_rgb: [f64; 3],
    pub leg_rgb: [f64; 3],
    /// Torso share of the body height below the head.
    pub torso_leg_ratio: f64,
    /// Torso width as a fraction of image width.
    pub body_width: f64,
    /// Head radius as a fraction of image height.
    pub head_size: f64,
    pub accessory: bool,
    pub accessory_rgb: [f64; 3],
}

impl IdentityProfile {
    pub fn derive(seed: u64, identity: u32) -> IdentityProfile {
        let mut rng = stream(seed, StreamTag::IdentityProfile, identity as u64, 0, 0);
        // saturated channels keep identities separable under camera tint
        let rgb = |rng: &mut ChaCha12Rng| {
            let mut c = [0.0; 3];
            for v in &mut c {
                *v = if rng.gen_bool(0.5) {
                    rng.gen_range(0.02..0.20)
                } else {
                    rng.gen_range(0.80..0.98)
                };
            }
            c
        };
        IdentityProfile {
            identity,
            torso_rgb: rgb(&mut rng),
            leg_rgb: rgb(&mut rng),
            torso_leg_ratio: rng.gen_range(0.35..0.65),
            body_width: rng.gen_range(0.30..0.62),
            head_size: rng.gen_range(0.050..0.090),
            accessory: rng.gen_bool(0.5),
            accessory_rgb: rgb(&mut rng),
        }
    }
}

#[derive(Clone, Debug)]
pub struct CameraProfile {
    pub camera: u32,
    pub tint: [f64; 3],
    pub brightness: f64,
    /// Maximum placement jitter in pixels.
    pub crop_jitter: usize,
    pub noise_sigma: f64,
}

impl CameraProfile {
    pub fn derive(seed: u64, camera: u32) -> CameraProfile {
        let mut rng = stream(seed, StreamTag::CameraProfile, camera as u64, 0, 0);
        CameraProfile {
            camera,
            tint: [
                rng.gen_range(0.85..1.15),
                rng.gen_range(0.85..1.15),
                rng.gen_range(0.85..1.15),
            ],
            brightness: rng.gen_range(-0.08..0.08),
            crop_jitter: rng.gen_range(1..4),
            noise_sigma: rng.gen_range(0.01..0.03),
        }
    }
}

// ── rendering ────────────────────────────────────────────────────────

fn fill_rect(img: &mut [f64], w: usize, x0: i64, y0: i64, x1: i64, y1: i64, h: usize, rgb: [f64; 3]) {
    for y in y0.max(0)..y1.min(h as i64) {
        for x in x0.max(0)..x1.min(w as i64) {
            let base = (y as usize * w + x as usize) * 3;
            img[base] = rgb[0];
            img[base + 1] = rgb[1];
            img[base + 2] = rgb[2];
        }
    }
}

fn fill_circle(img: &mut [f64], w: usize, h: usize, cx: f64, cy: f64, r: f64, rgb: [f64; 3]) {
    let (y0, y1) = ((cy - r).floor() as i64, (cy + r).ceil() as i64);
    let (x0, x1) = ((cx - r).floor() as i64, (cx + r).ceil() as i64);
    for y in y0.max(0)..(y1 + 1).min(h as i64) {
        for x in x0.max(0)..(x1 + 1).min(w as i64) {
            let dx = x as f64 + 0.5 - cx;
            let dy = y as f64 + 0.5 - cy;
            if dx * dx + dy * dy <= r * r {
                let base = (y as usize * w + x as usize) * 3;
                img[base] = rgb[0];
                img[base + 1] = rgb[1];
                img[base + 2] = rgb[2];
            }
        }
    }
}

/// Render one image as u8 RGB. Pure function of its arguments; the rng
/// stream is derived from the dataset seed and the image ordinal.
pub fn render_image(
    id_profile: &IdentityProfile,
    cam_profile: &CameraProfile,
    height: usize,
    width: usize,
    rng: &mut ChaCha12Rng,
) -> Vec<u8> {
    let (h, w) = (height, width);
    let mut img = vec![0.0f64; h * w * 3];

    // background: uniform gray with mild texture noise
    let gray = rng.gen_range(0.25..0.75);
    let bg_noise = Normal::new(0.0, 0.02).expect("sigma > 0");
    for px in 0..(h * w) {
        let v: f64 = gray + bg_noise.sample(rng);
        let base = px * 3;
        img[base] = v;
        img[base + 1] = v;
        img[base + 2] = v;
    }

    // pose jitter, then camera placement jitter
    let cx = w as f64 / 2.0 + rng.gen_range(-0.06..0.06) * w as f64;
    let top = rng.gen_range(0.04..0.10) * h as f64;
    let fig_h = rng.gen_range(0.78..0.88) * h as f64;
    let j = cam_profile.crop_jitter as i64;
    let dx = rng.gen_range(-j..=j) as f64;
    let dy = rng.gen_range(-j..=j) as f64;
    let (cx, top) = (cx + dx, top + dy);

    let head_r = id_profile.head_size * h as f64;
    let body_top = top + 2.0 * head_r;
    let body_h = (fig_h - 2.0 * head_r).max(1.0);
    let torso_h = id_profile.torso_leg_ratio * body_h;
    let torso_w = id_profile.body_width * w as f64;

    // torso
    fill_rect(
        &mut img,
        w,
        (cx - torso_w / 2.0) as i64,
        body_top as i64,
        (cx + torso_w / 2.0) as i64,
        (body_top + torso_h) as i64,
        h,
        id_profile.torso_rgb,
    );
    // legs: two columns with a gap
    let leg_w = torso_w / 3.0;
    let legs_top = body_top + torso_h;
    let legs_bottom = top + fig_h;
    fill_rect(
        &mut img,
        w,
        (cx - torso_w / 2.0) as i64,
        legs_top as i64,
        (cx - torso_w / 2.0 + leg_w) as i64,
        legs_bottom as i64,
        h,
        id_profile.leg_rgb,
    );
    fill_rect(
        &mut img,
        w,
        (cx + torso_w / 2.0 - leg_w) as i64,
        legs_top as i64,
        (cx + torso_w / 2.0) as i64,
        legs_bottom as i64,
        h,
        id_profile.leg_rgb,
    );
    // head
    fill_circle(&mut img, w, h, cx, top + head_r, head_r, [0.82, 0.67, 0.55]);
    // accessory: a hat block above the head
    if id_profile.accessory {
        fill_rect(
            &mut img,
            w,
            (cx - 1.2 * head_r) as i64,
            (top - 0.7 * head_r) as i64,
            (cx + 1.2 * head_r) as i64,
            (top + 0.3 * head_r) as i64,
            h,
            id_profile.accessory_rgb,
        );
    }

    // camera color response and sensor noise
    let sensor = Normal::new(0.0, cam_profile.noise_sigma).expect("sigma > 0");
    let mut out = Vec::with_capacity(h * w * 3);
    for px in 0..(h * w) {
        for c in 0..3 {
            let mut v = img[px * 3 + c] * cam_profile.tint[c] + cam_profile.brightness;
            v += sensor.sample(rng);
            out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    out
}

// ── RIMG binary format ───────────────────────────────────────────────

pub fn encode_rimg(height: usize, width: usize, rgb: &[u8]) -> Vec<u8> {
    assert_eq!(rgb.len(), height * width * 3);
    let mut out = Vec::with_capacity(16 + rgb.len());
    out.extend_from_slice(RIMG_MAGIC);
    out.extend_from_slice(&(height as u32).to_le_bytes());
    out.extend_from_slice(&(width as u32).to_le_bytes());
    out.extend_from_slice(&3u32.to_le_bytes());
    out.extend_from_slice(rgb);
    out
}

pub fn decode_rimg(path: &Path, bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let err = |offset: u64, msg: String| Error::Format {
        path: path.display().to_string(),
        offset,
        msg,
    };
    if bytes.len() < 4 || &bytes[..4] != RIMG_MAGIC {
        return Err(err(0, "bad magic, expected RIMG".into()));
    }
    if bytes.len() < 16 {
        return Err(err(bytes.len() as u64, "truncated header".into()));
    }
    let h = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let w = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let c = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
    if c != 3 {
        return Err(err(12, format!("expected 3 channels, got {c}")));
    }
    let expected = h * w * 3;
    let payload = &bytes[16..];
    if payload.len() != expected {
        return Err(err(
            16,
            format!("payload holds {} bytes, header implies {expected}", payload.len()),
        ));
    }
    Ok((h, w, payload.to_vec()))
}

pub fn read_rimg(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_rimg(path, &bytes)
}

// ── generation ───────────────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct GenParams {
    pub seed: u64,
    pub num_train_ids: usize,
    pub num_test_ids: usize,
    pub cameras: usize,
    pub imgs_per_id_per_cam: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for GenParams {
    fn default() -> Self {
        GenParams {
            seed: 0,
            num_train_ids: 64,
            num_test_ids: 32,
            cameras: 4,
            imgs_per_id_per_cam: 4,
            height: 64,
            width: 32,
        }
    }
}

impl GenParams {
    fn validate(&self) -> Result<()> {
        if self.cameras < 2 {
            return Err(Error::Config(
                "cross-camera retrieval needs at least 2 cameras".into(),
            ));
        }
        if self.num_train_ids == 0 || self.num_test_ids == 0 || self.height == 0 || self.width == 0
        {
            return Err(Error::Config("dataset parameters must be positive".into()));
        }
        if self.imgs_per_id_per_cam < 2 {
            return Err(Error::Config(
                "need at least 2 images per identity per camera so every query \
                 has a cross-camera gallery match"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Worker threads for generation: `SEMTOK_REID_THREADS` caps the count,
/// defaulting to the available parallelism.
fn generation_threads(tasks: usize) -> usize {
    let available = std::thread::available_parallelism()
        .map(|n| n.get())
        .unwrap_or(1);
    let cap = std::env::var("SEMTOK_REID_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or(available);
    cap.min(available).min(tasks).max(1)
}

/// Render the whole dataset under `out_dir` and write `index.csv`.
/// Bitwise deterministic in `(seed, parameters)`: every image draws from
/// its own ordinal-derived stream, so the output is identical no matter
/// how many worker threads render it.
pub fn generate_dataset(params: &GenParams, out_dir: &Path) -> Result<Vec<IndexRecord>> {
    params.validate()?;
    std::fs::create_dir_all(out_dir)?;

    let cam_profiles: Vec<CameraProfile> = (0..params.cameras)
        .map(|c| CameraProfile::derive(params.seed, c as u32))
        .collect();

    let total_ids = params.num_train_ids + params.num_test_ids;
    let mut records = Vec::new();
    for identity in 0..total_ids as u32 {
        let is_train = (identity as usize) < params.num_train_ids;
        for camera in 0..params.cameras as u32 {
            for k in 0..params.imgs_per_id_per_cam {
                let split = if is_train {
                    Split::Train
                } else if k == 0 {
                    Split::Query
                } else {
                    Split::Gallery
                };
                records.push(IndexRecord {
                    path: format!("img_{identity:04}_{camera:02}_{k:02}.rimg"),
                    identity,
                    camera,
                    split,
                });
            }
        }
    }

    let threads = generation_threads(records.len());
    let mut images: Vec<Vec<u8>> = vec![Vec::new(); records.len()];
    std::thread::scope(|scope| {
        let chunk = records.len().div_ceil(threads);
        for (t, out_chunk) in images.chunks_mut(chunk).enumerate() {
            let records = &records;
            let cam_profiles = &cam_profiles;
            scope.spawn(move || {
                for (off, slot) in out_chunk.iter_mut().enumerate() {
                    let ordinal = t * chunk + off;
                    let r = &records[ordinal];
                    let id_profile = IdentityProfile::derive(params.seed, r.identity);
                    let mut rng = stream(params.seed, StreamTag::RenderImage, ordinal as u64, 0, 0);
                    *slot = render_image(
                        &id_profile,
                        &cam_profiles[r.camera as usize],
                        params.height,
                        params.width,
                        &mut rng,
                    );
                }
            });
        }
    });

    for (r, rgb) in records.iter().zip(&images) {
        std::fs::File::create(out_dir.join(&r.path))?
            .write_all(&encode_rimg(params.height, params.width, rgb))?;
    }

    let mut index = String::from("path,identity,camera,split\n");
    for r in &records {
        index.push_str(&format!("{},{},{},{}\n", r.path, r.identity, r.camera, r.split));
    }
    std::fs::write(out_dir.join(INDEX_FILE), index)?;
    Ok(records)
}

// ── on-disk dataset access ───────────────────────────────────────────

pub struct Dataset {
    pub root: PathBuf,
    pub records: Vec<IndexRecord>,
    pub height: usize,
    pub width: usize,
    /// Raw u8 RGB per record, in index order.
    images: Vec<Vec<u8>>,
}

impl Dataset {
    /// Read `index.csv` and every referenced image into memory.
    pub fn load(root: &Path) -> Result<Dataset> {
        let index_path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&index_path).map_err(|e| {
            Error::Data(format!("cannot read {}: {e}", index_path.display()))
        })?;
        let mut lines = text.lines();
        match lines.next() {
            Some("path,identity,camera,split") => {}
            other => {
                return Err(Error::Data(format!(
                    "bad index header: {:?}",
                    other.unwrap_or("")
                )))
            }
        }
        let mut records = Vec::new();
        for (n, line) in lines.enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Data(format!("index line {}: expected 4 fields", n + 2)));
            }
            records.push(IndexRecord {
                path: fields[0].to_string(),
                identity: fields[1]
                    .parse()
                    .map_err(|_| Error::Data(format!("index line {}: bad identity", n + 2)))?,
                camera: fields[2]
                    .parse()
                    .map_err(|_| Error::Data(format!("index line {}: bad camera", n + 2)))?,
                split: Split::parse(fields[3])?,
            });
        }
        if records.is_empty() {
            return Err(Error::Data("index.csv holds no records".into()));
        }

        let mut images = Vec::with_capacity(records.len());
        let (mut height, mut width) = (0usize, 0usize);
        for r in &records {
            let (h, w, rgb) = read_rimg(&root.join(&r.path))?;
            if images.is_empty() {
                height = h;
                width = w;
            } else if h != height || w != width {
                return Err(Error::Data(format!(
                    "image {} is {h}x{w}, dataset is {height}x{width}",
                    r.path
                )));
            }
            images.push(rgb);
        }
        Ok(Dataset {
            root: root.to_path_buf(),
            records,
            height,
            width,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Decode record `i` to floats in [0, 1] with metadata joined.
    pub fn sample(&self, i: usize) -> ImageSample {
        let r = &self.records[i];
        ImageSample {
            pixels: self.images[i].iter().map(|&b| b as f64 / 255.0).collect(),
            height: self.height,
            width: self.width,
            identity: r.identity,
            camera: r.camera,
            split: r.split,
        }
    }

    pub fn indices_of(&self, split: Split) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.records[i].split == split)
            .collect()
    }

    pub fn num_cameras(&self) -> usize {
        self.records.iter().map(|r| r.camera).max().unwrap_or(0) as usize + 1
    }

    /// Distinct training identities in ascending order; positions define
    /// classifier class indices.
    pub fn train_classes(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    /// Per-channel mean over the training split (the erasing fill value).
    pub fn train_pixel_mean(&self) -> [f64; 3] {
        let mut sums = [0.0f64; 3];
        let mut count = 0usize;
        for (i, r) in self.records.iter().enumerate() {
            if r.split != Split::Train {
                continue;
            }
            for px in self.images[i].chunks_exact(3) {
                sums[0] += px[0] as f64 / 255.0;
                sums[1] += px[1] as f64 / 255.0;
                sums[2] += px[2] as f64 / 255.0;
            }
            count += self.height * self.width;
        }
        if count == 0 {
            return [0.5; 3];
        }
        [
            sums[0] / count as f64,
            sums[1] / count as f64,
            sums[2] / count as f64,
        ]
    }

    /// ReID protocol invariants: disjoint train/test identities and a
    /// cross-camera gallery match for every query.
    pub fn validate_protocol(&self) -> Result<()> {
        use std::collections::BTreeSet;
        let train: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| r.split == Split::Train)
            .map(|r| r.identity)
            .collect();
        let test: BTreeSet<u32> = self
            .records
            .iter()
            .filter(|r| r.split != Split::Train)
            .map(|r| r.identity)
            .collect();
        if train.intersection(&test).next().is_some() {
            return Err(Error::Data("train and test identities overlap".into()));
        }
        for q in self.records.iter().filter(|r| r.split == Split::Query) {
            let ok = self.records.iter().any(|g| {
                g.split == Split::Gallery && g.identity == q.identity && g.camera != q.camera
            });
            if !ok {
                return Err(Error::Data(format!(
                    "query identity {} camera {} has no cross-camera gallery match",
                    q.identity, q.camera
                )));
            }
        }
        Ok(())
    }
}

// ── training-time augmentation ───────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub crop_p: f64,
    pub erase_p: f64,
    pub pad: usize,
    pub erase_area: (f64, f64),
    pub erase_aspect: (f64, f64),
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_p: 0.5,
            crop_p: 1.0,
            erase_p: 0.5,
            pad: 4,
            erase_area: (0.02, 0.20),
            erase_aspect: (0.3, 1.0 / 0.3),
        }
    }
}

impl AugmentConfig {
    /// Everything off: augment becomes the identity transform.
    pub fn disabled() -> Self {
        AugmentConfig {
            flip_p: 0.0,
            crop_p: 0.0,
            erase_p: 0.0,
            ..AugmentConfig::default()
        }
    }
}

pub fn horizontal_flip(pixels: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; pixels.len()];
    for y in 0..h {
        for x in 0..w {
            let src = (y * w + x) * 3;
            let dst = (y * w + (w - 1 - x)) * 3;
            out[dst..dst + 3].copy_from_slice(&pixels[src..src + 3]);
        }
    }
    out
}

fn reflect_index(i: i64, len: usize) -> usize {
    let len = len as i64;
    let j = if i < 0 {
        -i
    } else if i >= len {
        2 * len - 2 - i
    } else {
        i
    };
    j.clamp(0, len - 1) as usize
}

/// Flip / pad+crop / erase pipeline, in that order. Each stage consumes rng
/// draws only when its probability gate passes, and the gates are always
/// drawn, so the stream stays aligned across images.
pub fn augment(
    pixels: &[f64],
    h: usize,
    w: usize,
    cfg: &AugmentConfig,
    fill: &[f64; 3],
    rng: &mut ChaCha12Rng,
) -> Vec<f64> {
    let mut img = pixels.to_vec();

    if rng.gen_bool(cfg.flip_p.clamp(0.0, 1.0)) {
        img = horizontal_flip(&img, h, w);
    }

    if rng.gen_bool(cfg.crop_p.clamp(0.0, 1.0)) {
        let p = cfg.pad as i64;
        let dy = rng.gen_range(0..=(2 * cfg.pad)) as i64 - p;
        let dx = rng.gen_range(0..=(2 * cfg.pad)) as i64 - p;
        let mut shifted = vec![0.0; img.len()];
        for y in 0..h {
            for x in 0..w {
                let sy = reflect_index(y as i64 + dy, h);
                let sx = reflect_index(x as i64 + dx, w);
                let src = (sy * w + sx) * 3;
                let dst = (y * w + x) * 3;
                shifted[dst..dst + 3].copy_from_slice(&img[src..src + 3]);
            }
        }
        img = shifted;
    }

    if rng.gen_bool(cfg.erase_p.clamp(0.0, 1.0)) {
        let total = (h * w) as f64;
        for _attempt in 0..100 {
            let frac = rng.gen_range(cfg.erase_area.0..cfg.erase_area.1);
            let aspect = rng.gen_range(cfg.erase_aspect.0..cfg.erase_aspect.1);
            let target = frac * total;
            let eh = (target * aspect).sqrt().round().max(1.0) as usize;
            let ew = (target / aspect).sqrt().round().max(1.0) as usize;
            let area_frac = (eh * ew) as f64 / total;
            if eh >= h || ew >= w || area_frac < cfg.erase_area.0 || area_frac > cfg.erase_area.1 {
                continue;
            }
            let y0 = rng.gen_range(0..=(h - eh));
            let x0 = rng.gen_range(0..=(w - ew));
            for y in y0..y0 + eh {
                for x in x0..x0 + ew {
                    let base = (y * w + x) * 3;
                    img[base] = fill[0];
                    img[base + 1] = fill[1];
                    img[base + 2] = fill[2];
                }
            }
            break;
        }
    }

    img
}

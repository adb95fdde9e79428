//! Exact dual-frame decoding through a cached inverse frame operator.
//!
//! The cache for one operator is a directory named after the SHA-256 of its
//! canonical key. It holds `meta.txt` and the block store `inverse/` with
//! the lower blocks of `(Φ*Φ)⁻¹`.

use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::analysis::{AnalysisOperator, Image};
use crate::error::{Error, Result};
use crate::ooc::{available_bytes, block_matvec, identity_residual, invert_recursive, Block, BlockMatrixStore};
use crate::pyramid::CoarseLayer;
use crate::roc::{params_bits, RankOrderCode};

/// Largest accepted `‖(Φ*Φ)·S − I‖_F / √(N²)` for a stored inverse.
pub const RESIDUAL_TOLERANCE: f64 = 1e-8;

pub const DEFAULT_BLOCK_SIZE: usize = 128;

const META_FILE: &str = "meta.txt";
const META_MAGIC: &str = "roc-dual-cache 1";
const INVERSE_DIR: &str = "inverse";
const KEY_VERSION: &str = "v1";

/// Cache root: `$ROC_CACHE_DIR`, else `$XDG_CACHE_HOME/retina-roc`, else
/// `~/.cache/retina-roc`, else a directory under the system temp dir.
pub fn default_cache_root() -> PathBuf {
    if let Some(dir) = std::env::var_os("ROC_CACHE_DIR").filter(|v| !v.is_empty()) {
        return PathBuf::from(dir);
    }
    if let Some(dir) = std::env::var_os("XDG_CACHE_HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(dir).join("retina-roc");
    }
    if let Some(home) = std::env::var_os("HOME").filter(|v| !v.is_empty()) {
        return PathBuf::from(home).join(".cache").join("retina-roc");
    }
    std::env::temp_dir().join("retina-roc")
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DualBuildOptions {
    pub block_size: usize,
    pub cache_root: PathBuf,
}

impl Default for DualBuildOptions {
    fn default() -> Self {
        Self { block_size: DEFAULT_BLOCK_SIZE, cache_root: default_cache_root() }
    }
}

/// Canonical identity of the frame an operator spans. Parameters are
/// compared by their bit patterns.
pub fn cache_key(op: &AnalysisOperator) -> String {
    let g = op.grid();
    let [wc, ws, ratio, sigma] = params_bits(op.params());
    let coarse = match op.options().coarse {
        CoarseLayer::ScalingFunction => "scaling",
        CoarseLayer::DoG => "dog",
    };
    format!(
        "{KEY_VERSION};N={};K={};w_c={wc:016x};w_s={ws:016x};sigma_ratio={ratio:016x};sigma_c_finest={sigma:016x};boundary={};coarse={coarse};gain=stride",
        g.image_side,
        g.layer_count,
        op.boundary().code()
    )
}

fn key_digest(key: &str) -> String {
    hex::encode(Sha256::digest(key.as_bytes()))
}

/// Dense `Φ*Φ` written block by block into a symmetric store at `dir`.
/// Entry `(a, b)` sums `Φ[p,a]·Φ[p,b]` over the rows `p` of column `a` in
/// ascending order.
pub fn build_frame_operator(op: &AnalysisOperator, block_size: usize, dir: impl AsRef<Path>) -> Result<BlockMatrixStore> {
    let dir = dir.as_ref();
    let n = op.col_count();
    let store = BlockMatrixStore::create_symmetric(dir, n, block_size)?;
    let blocks: Vec<(usize, usize)> = store.stored_blocks().collect();
    blocks.into_par_iter().try_for_each(|(r, c)| {
        let (h, w) = store.block_dims(r, c);
        let (r0, c0) = (r * block_size, c * block_size);
        let (lo, hi) = (c0 as u32, (c0 + w) as u32);
        let mut blk = Block::zeros(h, w);
        let data = blk.data_mut();
        for i in 0..h {
            let (ps, vs) = op.column(r0 + i);
            let out = &mut data[i * w..(i + 1) * w];
            for (&p, &v) in ps.iter().zip(vs) {
                let (cols, vals) = op.row(p as usize);
                let start = cols.partition_point(|&b| b < lo);
                let end = cols.partition_point(|&b| b < hi);
                for (&b, &u) in cols[start..end].iter().zip(&vals[start..end]) {
                    out[(b - lo) as usize] += v * u;
                }
            }
        }
        store.write_block(r, c, &blk)
    })?;
    Ok(store)
}

/// Bytes one symmetric `n×n` store occupies.
fn symmetric_store_bytes(n: usize, block_size: usize) -> u64 {
    let nb = n.div_ceil(block_size) as u64;
    let b = block_size as u64;
    // Upper estimate: every stored block at full size.
    nb * (nb + 1) / 2 * b * b * 8
}

/// Handle on a validated inverse frame operator in the cache.
#[derive(Debug)]
pub struct DualOperatorCache {
    dir: PathBuf,
    key: String,
    inverse: BlockMatrixStore,
    residual: f64,
    checksum: String,
    hit: bool,
}

impl DualOperatorCache {
    /// Opens the cache entry for `op` under `cache_root`, or returns `None`
    /// when there is none. An entry that fails validation is an error.
    pub fn open(op: &AnalysisOperator, cache_root: impl AsRef<Path>) -> Result<Option<Self>> {
        let key = cache_key(op);
        let dir = cache_root.as_ref().join(key_digest(&key));
        if !dir.join(META_FILE).exists() {
            return Ok(None);
        }
        let meta_path = dir.join(META_FILE);
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::storage(&meta_path, e.to_string()))?;
        let corrupt = |msg: &str| Error::Corruption(format!("{}: {msg}", meta_path.display()));
        let mut lines = text.lines();
        if lines.next() != Some(META_MAGIC) {
            return Err(corrupt("missing header"));
        }
        let mut field = |name: &str| -> Result<String> {
            lines
                .next()
                .and_then(|l| l.strip_prefix(name))
                .and_then(|l| l.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| corrupt(&format!("missing `{name}`")))
        };
        let stored_key = field("key")?;
        let residual: f64 = field("residual")?.parse().map_err(|_| corrupt("bad residual"))?;
        let checksum = field("checksum")?;
        if stored_key != key {
            return Err(corrupt("stored key does not match the operator"));
        }
        let inverse = BlockMatrixStore::open(dir.join(INVERSE_DIR)).map_err(|e| corrupt(&e.to_string()))?;
        if inverse.rows() != op.col_count() || !inverse.is_symmetric() {
            return Err(corrupt("stored inverse has the wrong shape"));
        }
        let actual = store_checksum(&inverse)?;
        if actual != checksum {
            return Err(Error::Corruption(format!(
                "{}: block checksum {actual} does not match recorded {checksum}",
                dir.display()
            )));
        }
        Ok(Some(Self { dir, key, inverse, residual, checksum, hit: true }))
    }

    /// Opens the cached inverse for `op`, building and persisting it first
    /// when absent. Nothing is written unless the residual check passes.
    pub fn build(op: &AnalysisOperator, options: &DualBuildOptions) -> Result<Self> {
        if let Some(found) = Self::open(op, &options.cache_root)? {
            return Ok(found);
        }
        if options.block_size == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        let root = &options.cache_root;
        fs::create_dir_all(root).map_err(|e| Error::storage(root, e.to_string()))?;

        let n = op.col_count();
        let required = 3 * symmetric_store_bytes(n, options.block_size);
        if let Some(free) = available_bytes(root) {
            if free < required {
                return Err(Error::Resource(format!(
                    "building the dual operator needs about {required} bytes of disk under {}, {free} available",
                    root.display()
                )));
            }
        }

        let key = cache_key(op);
        let staging = tempfile::Builder::new()
            .prefix(".build-")
            .tempdir_in(root)
            .map_err(|e| Error::storage(root, e.to_string()))?;
        let gram = build_frame_operator(op, options.block_size, staging.path().join("frame"))?;
        let inverse = invert_recursive(&gram, staging.path().join(INVERSE_DIR))?;
        let residual = identity_residual(&gram, &inverse)? / (n as f64).sqrt();
        gram.remove()?;
        if !(residual <= RESIDUAL_TOLERANCE) {
            return Err(Error::Consistency(format!(
                "inverse frame operator residual {residual:e} exceeds {RESIDUAL_TOLERANCE:e}"
            )));
        }
        let checksum = store_checksum(&inverse)?;
        drop(inverse);
        let meta = format!("{META_MAGIC}\nkey {key}\nresidual {residual:e}\nchecksum {checksum}\n");
        let meta_path = staging.path().join(META_FILE);
        fs::write(&meta_path, meta).map_err(|e| Error::storage(&meta_path, e.to_string()))?;

        let dir = root.join(key_digest(&key));
        let staged = staging.keep();
        if let Err(e) = fs::rename(&staged, &dir) {
            let _ = fs::remove_dir_all(&staged);
            if !dir.join(META_FILE).exists() {
                return Err(Error::storage(&dir, e.to_string()));
            }
        }
        let inverse = BlockMatrixStore::open(dir.join(INVERSE_DIR))?;
        Ok(Self { dir, key, inverse, residual, checksum, hit: false })
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn key(&self) -> &str {
        &self.key
    }

    pub fn inverse(&self) -> &BlockMatrixStore {
        &self.inverse
    }

    /// Residual recorded when the entry was built.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    /// Whether this handle came from an existing entry.
    pub fn was_hit(&self) -> bool {
        self.hit
    }

    /// `(Φ*Φ)⁻¹ Φ* c`, with `c` the masked coefficients of `code`.
    pub fn decode(&self, op: &AnalysisOperator, code: &RankOrderCode) -> Result<Image> {
        dual_decode(op, self, code)
    }
}

/// SHA-256 over the stored blocks in manifest order.
fn store_checksum(store: &BlockMatrixStore) -> Result<String> {
    let mut hasher = Sha256::new();
    let mut buf = vec![0u8; 1 << 16];
    for (r, c) in store.stored_blocks() {
        let path = store.path().join(format!("blk_{r}_{c}.f64"));
        let mut file = match fs::File::open(&path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
                hasher.update(format!("absent {r} {c}\n").as_bytes());
                continue;
            }
            Err(e) => return Err(Error::storage(&path, e.to_string())),
        };
        loop {
            let got = file.read(&mut buf).map_err(|e| Error::storage(&path, e.to_string()))?;
            if got == 0 {
                break;
            }
            hasher.update(&buf[..got]);
        }
    }
    Ok(hex::encode(hasher.finalize()))
}

/// Exact dual-frame decode. A truncated code is decoded by the same inverse
/// applied to the adjoint of its masked coefficients.
pub fn dual_decode(op: &AnalysisOperator, cache: &DualOperatorCache, code: &RankOrderCode) -> Result<Image> {
    code.header().ensure_matches(op)?;
    if cache.key != cache_key(op) {
        return Err(Error::invalid("dual operator cache was built for a different analysis operator"));
    }
    let adjoint = op.apply_adjoint(&code.masked_coefficients());
    let f = block_matvec(&cache.inverse, &adjoint)?;
    Image::new(op.grid().image_side, f)
}

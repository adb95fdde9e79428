use std::fs::{self, File, OpenOptions};
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::os::unix::fs::FileExt;
use std::path::{Path, PathBuf};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::block::Block;
use crate::error::{Error, Result};

const MANIFEST: &str = "manifest.txt";
const MANIFEST_MAGIC: &str = "roc-block-matrix 1";
const DATA_FILE: &str = "data.f64";
const ELEMENT_TAG: &str = "f64-le";

/// Where block payloads live on disk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Layout {
    /// One `blk_R_C.f64` file per block. Absent files read as zeros.
    #[default]
    BlockFiles,
    /// Every block in one preallocated `data.f64`, addressed by offset.
    SingleFile,
}

impl Layout {
    fn name(self) -> &'static str {
        match self {
            Layout::BlockFiles => "block-files",
            Layout::SingleFile => "single-file",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "block-files" => Some(Layout::BlockFiles),
            "single-file" => Some(Layout::SingleFile),
            _ => None,
        }
    }
}

/// Dense matrix tiled into `block_size` square blocks and kept in a
/// directory. Edge blocks are truncated to the matrix extent.
///
/// A symmetric store keeps only the blocks on or below the diagonal and
/// serves an upper block by transposing its mirror.
#[derive(Debug)]
pub struct BlockMatrixStore {
    dir: PathBuf,
    rows: usize,
    cols: usize,
    block_size: usize,
    symmetric: bool,
    layout: Layout,
    data: Option<File>,
}

impl BlockMatrixStore {
    pub fn create(dir: impl AsRef<Path>, rows: usize, cols: usize, block_size: usize) -> Result<Self> {
        Self::create_with(dir, rows, cols, block_size, false, Layout::default())
    }

    pub fn create_symmetric(dir: impl AsRef<Path>, n: usize, block_size: usize) -> Result<Self> {
        Self::create_with(dir, n, n, block_size, true, Layout::default())
    }

    pub fn create_with(
        dir: impl AsRef<Path>,
        rows: usize,
        cols: usize,
        block_size: usize,
        symmetric: bool,
        layout: Layout,
    ) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        if block_size == 0 {
            return Err(Error::invalid("block size must be positive"));
        }
        if rows == 0 || cols == 0 {
            return Err(Error::invalid(format!("matrix dimensions must be positive, got {rows}x{cols}")));
        }
        if symmetric && rows != cols {
            return Err(Error::invalid(format!("a symmetric store must be square, got {rows}x{cols}")));
        }
        fs::create_dir_all(&dir).map_err(|e| Error::storage(&dir, e.to_string()))?;
        if dir.join(MANIFEST).exists() {
            return Err(Error::storage(&dir, "directory already holds a block matrix"));
        }
        let mut store = Self { dir, rows, cols, block_size, symmetric, layout, data: None };
        if layout == Layout::SingleFile {
            let path = store.dir.join(DATA_FILE);
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .create_new(true)
                .open(&path)
                .map_err(|e| Error::storage(&path, e.to_string()))?;
            file.set_len(store.stored_elements() as u64 * 8)
                .map_err(|e| Error::storage(&path, e.to_string()))?;
            store.data = Some(file);
        }
        store.write_manifest()?;
        Ok(store)
    }

    /// Reopens a store, checking the manifest against the locators its
    /// dimensions imply.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        let path = dir.join(MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::storage(&path, e.to_string()))?;
        let bad = |msg: String| Error::storage(&path, msg);

        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_MAGIC) {
            return Err(bad("missing manifest header".into()));
        }
        let mut field = |key: &str| -> Result<String> {
            let line = lines.next().ok_or_else(|| bad(format!("manifest ends before `{key}`")))?;
            line.strip_prefix(key)
                .and_then(|rest| rest.strip_prefix(' '))
                .map(str::to_owned)
                .ok_or_else(|| bad(format!("expected `{key}`, found `{line}`")))
        };
        let num = |s: String, key: &str| s.parse::<usize>().map_err(|_| bad(format!("bad `{key}` value `{s}`")));
        let rows = num(field("rows")?, "rows")?;
        let cols = num(field("cols")?, "cols")?;
        let block_size = num(field("block_size")?, "block_size")?;
        let symmetric = match field("symmetric")?.as_str() {
            "true" => true,
            "false" => false,
            s => return Err(bad(format!("bad `symmetric` value `{s}`"))),
        };
        let element = field("element")?;
        if element != ELEMENT_TAG {
            return Err(bad(format!("unsupported element type `{element}`")));
        }
        let layout_name = field("layout")?;
        let layout = Layout::parse(&layout_name).ok_or_else(|| bad(format!("unknown layout `{layout_name}`")))?;
        if rows == 0 || cols == 0 || block_size == 0 || (symmetric && rows != cols) {
            return Err(bad("inconsistent dimensions".into()));
        }

        let mut store = Self { dir, rows, cols, block_size, symmetric, layout, data: None };
        let expected: Vec<String> = store.stored_blocks().map(|(r, c)| store.table_line(r, c)).collect();
        let table: Vec<&str> = lines.filter(|l| !l.is_empty()).collect();
        if table.len() != expected.len() {
            return Err(bad(format!("block table has {} entries, expected {}", table.len(), expected.len())));
        }
        for (got, want) in table.iter().zip(&expected) {
            if *got != want {
                return Err(bad(format!("block table entry `{got}` does not match `{want}`")));
            }
        }
        if layout == Layout::SingleFile {
            let path = store.dir.join(DATA_FILE);
            let file = OpenOptions::new()
                .read(true)
                .write(true)
                .open(&path)
                .map_err(|e| Error::storage(&path, e.to_string()))?;
            let len = file.metadata().map_err(|e| Error::storage(&path, e.to_string()))?.len();
            if len != store.stored_elements() as u64 * 8 {
                return Err(Error::storage(&path, format!("data file is {len} bytes, expected {}", store.stored_elements() * 8)));
            }
            store.data = Some(file);
        }
        Ok(store)
    }

    /// Writes a row-major dense matrix into a new store. A symmetric store
    /// takes the lower blocks only.
    pub fn from_dense(
        dir: impl AsRef<Path>,
        rows: usize,
        cols: usize,
        block_size: usize,
        data: &[f64],
        symmetric: bool,
    ) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!("{rows}x{cols} matrix needs {} values, got {}", rows * cols, data.len())));
        }
        let store = Self::create_with(dir, rows, cols, block_size, symmetric, Layout::default())?;
        for (r, c) in store.stored_blocks().collect::<Vec<_>>() {
            let (h, w) = store.block_dims(r, c);
            let (r0, c0) = (r * block_size, c * block_size);
            let mut vals = Vec::with_capacity(h * w);
            for i in 0..h {
                vals.extend_from_slice(&data[(r0 + i) * cols + c0..(r0 + i) * cols + c0 + w]);
            }
            store.write_block(r, c, &Block::from_vec(h, w, vals)?)?;
        }
        Ok(store)
    }

    /// Reads the whole matrix into memory, row-major.
    pub fn to_dense(&self) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.rows * self.cols];
        for r in 0..self.block_rows() {
            for c in 0..self.block_cols() {
                let b = self.read_block(r, c)?;
                let (r0, c0) = (r * self.block_size, c * self.block_size);
                for i in 0..b.rows() {
                    let dst = (r0 + i) * self.cols + c0;
                    out[dst..dst + b.cols()].copy_from_slice(&b.data()[i * b.cols()..(i + 1) * b.cols()]);
                }
            }
        }
        Ok(out)
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn block_size(&self) -> usize {
        self.block_size
    }

    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn layout(&self) -> Layout {
        self.layout
    }

    pub fn block_rows(&self) -> usize {
        self.rows.div_ceil(self.block_size)
    }

    pub fn block_cols(&self) -> usize {
        self.cols.div_ceil(self.block_size)
    }

    /// Height and width of block `(r, c)`.
    pub fn block_dims(&self, r: usize, c: usize) -> (usize, usize) {
        let b = self.block_size;
        ((self.rows - r * b).min(b), (self.cols - c * b).min(b))
    }

    /// Whether block `(r, c)` has storage of its own.
    pub fn stores_block(&self, r: usize, c: usize) -> bool {
        !self.symmetric || r >= c
    }

    pub fn stored_blocks(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let nc = self.block_cols();
        (0..self.block_rows()).flat_map(move |r| (0..nc).map(move |c| (r, c))).filter(|&(r, c)| self.stores_block(r, c))
    }

    pub fn read_block(&self, r: usize, c: usize) -> Result<Block> {
        self.read_block_oriented(r, c, false)
    }

    /// Reads block `(r, c)`, transposed when `transposed` is set.
    pub fn read_block_oriented(&self, r: usize, c: usize, transposed: bool) -> Result<Block> {
        self.check_index(r, c)?;
        let (sr, sc, flip) = if self.stores_block(r, c) { (r, c, transposed) } else { (c, r, !transposed) };
        let mut b = self.read_stored(sr, sc)?;
        if flip {
            b.transpose_in_place();
        }
        Ok(b)
    }

    pub fn write_block(&self, r: usize, c: usize, block: &Block) -> Result<()> {
        self.check_index(r, c)?;
        if !self.stores_block(r, c) {
            return Err(Error::invalid(format!("block ({r},{c}) lies above the diagonal of a symmetric store")));
        }
        let dims = self.block_dims(r, c);
        if (block.rows(), block.cols()) != dims {
            return Err(Error::invalid(format!(
                "block ({r},{c}) is {}x{}, got {}x{}",
                dims.0,
                dims.1,
                block.rows(),
                block.cols()
            )));
        }
        match self.layout {
            Layout::BlockFiles => {
                let path = self.block_path(r, c);
                let file = File::create(&path).map_err(|e| Error::storage(&path, e.to_string()))?;
                let mut w = BufWriter::new(file);
                write_values(&mut w, block.data()).map_err(|e| Error::storage(&path, e.to_string()))
            }
            Layout::SingleFile => {
                let file = self.data.as_ref().expect("single-file store keeps its data file open");
                let mut w = BufWriter::new(AtWriter { file, pos: self.block_offset(r, c) });
                write_values(&mut w, block.data()).map_err(|e| Error::storage(&self.dir.join(DATA_FILE), e.to_string()))
            }
        }
    }

    /// Deletes the store directory.
    pub fn remove(self) -> Result<()> {
        let dir = self.dir.clone();
        drop(self);
        fs::remove_dir_all(&dir).map_err(|e| Error::storage(&dir, e.to_string()))
    }

    fn read_stored(&self, r: usize, c: usize) -> Result<Block> {
        let (h, w) = self.block_dims(r, c);
        let mut block = Block::zeros(h, w);
        match self.layout {
            Layout::BlockFiles => {
                let path = self.block_path(r, c);
                let file = match File::open(&path) {
                    Ok(f) => f,
                    Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(block),
                    Err(e) => return Err(Error::storage(&path, e.to_string())),
                };
                let len = file.metadata().map_err(|e| Error::storage(&path, e.to_string()))?.len();
                if len != (h * w * 8) as u64 {
                    return Err(Error::storage(&path, format!("block file is {len} bytes, expected {}", h * w * 8)));
                }
                BufReader::new(file)
                    .read_f64_into::<LittleEndian>(block.data_mut())
                    .map_err(|e| Error::storage(&path, e.to_string()))?;
            }
            Layout::SingleFile => {
                let file = self.data.as_ref().expect("single-file store keeps its data file open");
                BufReader::new(AtReader { file, pos: self.block_offset(r, c) })
                    .read_f64_into::<LittleEndian>(block.data_mut())
                    .map_err(|e| Error::storage(&self.dir.join(DATA_FILE), e.to_string()))?;
            }
        }
        Ok(block)
    }

    fn check_index(&self, r: usize, c: usize) -> Result<()> {
        if r >= self.block_rows() || c >= self.block_cols() {
            return Err(Error::invalid(format!(
                "block ({r},{c}) outside a {}x{} block grid",
                self.block_rows(),
                self.block_cols()
            )));
        }
        Ok(())
    }

    fn block_path(&self, r: usize, c: usize) -> PathBuf {
        self.dir.join(format!("blk_{r}_{c}.f64"))
    }

    /// Byte offset of a stored block inside the single data file. Blocks
    /// are packed row by row in the order of [`Self::stored_blocks`].
    fn block_offset(&self, r: usize, c: usize) -> u64 {
        let b = self.block_size;
        let (h, _) = self.block_dims(r, c);
        let before_row = if self.symmetric { b * b * r * (r + 1) / 2 } else { r * b * self.cols };
        ((before_row + h * b * c) * 8) as u64
    }

    fn stored_elements(&self) -> usize {
        self.stored_blocks()
            .map(|(r, c)| {
                let (h, w) = self.block_dims(r, c);
                h * w
            })
            .sum()
    }

    fn table_line(&self, r: usize, c: usize) -> String {
        match self.layout {
            Layout::BlockFiles => format!("block {r} {c} blk_{r}_{c}.f64"),
            Layout::SingleFile => format!("block {r} {c} {DATA_FILE}@{}", self.block_offset(r, c)),
        }
    }

    fn write_manifest(&self) -> Result<()> {
        let mut text = format!(
            "{MANIFEST_MAGIC}\nrows {}\ncols {}\nblock_size {}\nsymmetric {}\nelement {ELEMENT_TAG}\nlayout {}\n",
            self.rows,
            self.cols,
            self.block_size,
            self.symmetric,
            self.layout.name()
        );
        for (r, c) in self.stored_blocks() {
            text.push_str(&self.table_line(r, c));
            text.push('\n');
        }
        let path = self.dir.join(MANIFEST);
        fs::write(&path, text).map_err(|e| Error::storage(&path, e.to_string()))
    }
}

fn write_values(w: &mut impl Write, values: &[f64]) -> io::Result<()> {
    for &v in values {
        w.write_f64::<LittleEndian>(v)?;
    }
    w.flush()
}

struct AtReader<'a> {
    file: &'a File,
    pos: u64,
}

impl Read for AtReader<'_> {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        let n = self.file.read_at(buf, self.pos)?;
        self.pos += n as u64;
        Ok(n)
    }
}

struct AtWriter<'a> {
    file: &'a File,
    pos: u64,
}

impl Write for AtWriter<'_> {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        let n = self.file.write_at(buf, self.pos)?;
        self.pos += n as u64;
        Ok(n)
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// Free bytes on the file system holding `path`, if it can be queried.
pub fn available_bytes(path: &Path) -> Option<u64> {
    use std::ffi::CString;
    use std::os::unix::ffi::OsStrExt;

    let probe = path.ancestors().find(|p| p.exists())?;
    let cpath = CString::new(probe.as_os_str().as_bytes()).ok()?;
    let mut stat: libc::statvfs = unsafe { std::mem::zeroed() };
    // SAFETY: `cpath` is NUL terminated and `stat` is a valid out pointer.
    let rc = unsafe { libc::statvfs(cpath.as_ptr(), &mut stat) };
    if rc != 0 {
        return None;
    }
    Some(stat.f_bavail as u64 * stat.f_frsize as u64)
}

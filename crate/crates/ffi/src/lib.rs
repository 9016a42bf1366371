//! C interface to the mapping network, the toy pipeline and the metrics.
//!
//! Every fallible function returns a [`MaplStatus`]; on failure the message
//! is available from [`mapl_last_error`] on the same thread. Handles are
//! opaque and must be released with their `*_free` function. Strings handed
//! out by the library are released with [`mapl_string_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use mapl::backbones::{Backbones, ToyImage};
use mapl::backbones::synth::{question_text, VqaExample};
use mapl::inference;
use mapl::mapper::{count_parameters, Mapper, MapperConfig, VisualFeatures};
use mapl::metrics;
use mapl::tensor::{Checkpoint, Tensor};
use mapl::Error;

/// Result codes shared by every function in this library.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaplStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Shape = 3,
    Config = 4,
    Data = 5,
    Length = 6,
    Numeric = 7,
    Checkpoint = 8,
    Parse = 9,
    Io = 10,
    BufferTooSmall = 11,
    Panic = 12,
}

/// A trained mapping network.
pub struct MaplMapper {
    inner: Mapper,
}

/// Frozen backbones plus a trained mapping network.
pub struct MaplPipeline {
    backbones: Backbones,
    mapper: Mapper,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

struct Failure(MaplStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match &e {
            Error::Shape { .. } => MaplStatus::Shape,
            Error::Config { .. } => MaplStatus::Config,
            Error::Data(_) | Error::Index(_) => MaplStatus::Data,
            Error::Length(_) => MaplStatus::Length,
            Error::DegenerateRow { .. } | Error::NonFinite { .. } | Error::Gradient(_) => {
                MaplStatus::Numeric
            }
            Error::Checkpoint(_) => MaplStatus::Checkpoint,
            Error::Parse { .. } => MaplStatus::Parse,
            Error::Io { .. } => MaplStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn set_last_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> MaplStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => MaplStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_last_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".to_string());
            set_last_error(format!("internal panic: {msg}"));
            MaplStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(MaplStatus::NullPointer, format!("`{what}` is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(MaplStatus::InvalidUtf8, format!("`{what}` is not valid UTF-8")))
}

unsafe fn str_array(p: *const *const c_char, n: usize, what: &str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|&s| str_arg(s, what).map(str::to_string))
        .collect()
}

unsafe fn out_ref<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure(MaplStatus::Data, "output contains a nul byte".into()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn mapl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. The pointer stays
/// valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mapl_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `s` must be NULL or a string returned by this library, freed once.
#[no_mangle]
pub unsafe extern "C" fn mapl_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Trainable parameter count of a mapper. `config` holds `key = value`
/// lines applied on top of the medium configuration (`variant`, `size`,
/// `l_out`, ...; an optional `mapper.` prefix is accepted).
///
/// # Safety
/// `config` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapl_count_parameters(config: *const c_char, out: *mut u64) -> MaplStatus {
    guard(|| {
        let text = str_arg(config, "config")?;
        let out = out_ref(out, "out")?;
        let mut cfg = MapperConfig::medium();
        for (k, v) in mapl::config::parse_config(text, "<config>")? {
            cfg.set(&k, &v)?;
        }
        cfg.normalize();
        cfg.validate()?;
        *out = count_parameters(&cfg) as u64;
        Ok(())
    })
}

/// Accuracy of `prediction` against exactly ten reference answers.
///
/// # Safety
/// `prediction` and each of the `n_answers` entries of `answers` must be
/// nul-terminated strings; `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapl_vqa_accuracy(
    prediction: *const c_char,
    answers: *const *const c_char,
    n_answers: usize,
    out: *mut f64,
) -> MaplStatus {
    guard(|| {
        let prediction = str_arg(prediction, "prediction")?;
        let answers = str_array(answers, n_answers, "answers")?;
        let out = out_ref(out, "out")?;
        *out = metrics::vqa_accuracy(prediction, &answers)?;
        Ok(())
    })
}

/// Corpus BLEU-4 with one reference per candidate.
///
/// # Safety
/// `candidates` and `references` must each hold `n` nul-terminated strings;
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapl_bleu4(
    candidates: *const *const c_char,
    references: *const *const c_char,
    n: usize,
    out: *mut f64,
) -> MaplStatus {
    guard(|| {
        let candidates = str_array(candidates, n, "candidates")?;
        let references: Vec<Vec<String>> = str_array(references, n, "references")?
            .into_iter()
            .map(|r| vec![r])
            .collect();
        let out = out_ref(out, "out")?;
        *out = metrics::bleu4(&candidates, &references)?;
        Ok(())
    })
}

fn load_mapper(path: &str) -> Result<Mapper, Failure> {
    Ok(Mapper::from_checkpoint(Checkpoint::load(path)?)?)
}

/// Loads a mapper checkpoint.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapl_mapper_load(path: *const c_char, out: *mut *mut MaplMapper) -> MaplStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let out = out_ref(out, "out")?;
        *out = Box::into_raw(Box::new(MaplMapper {
            inner: load_mapper(path)?,
        }));
        Ok(())
    })
}

/// # Safety
/// `mapper` must be NULL or a handle from [`mapl_mapper_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn mapl_mapper_free(mapper: *mut MaplMapper) {
    if !mapper.is_null() {
        drop(Box::from_raw(mapper));
    }
}

/// Expected feature matrix shape, `rows x cols`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapl_mapper_input_shape(
    mapper: *const MaplMapper,
    rows: *mut usize,
    cols: *mut usize,
) -> MaplStatus {
    guard(|| {
        let m = mapper.as_ref().ok_or_else(|| null("mapper"))?;
        *out_ref(rows, "rows")? = m.inner.cfg.l_in;
        *out_ref(cols, "cols")? = m.inner.cfg.d_in;
        Ok(())
    })
}

/// Produced prefix shape, `rows x cols`.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapl_mapper_output_shape(
    mapper: *const MaplMapper,
    rows: *mut usize,
    cols: *mut usize,
) -> MaplStatus {
    guard(|| {
        let m = mapper.as_ref().ok_or_else(|| null("mapper"))?;
        *out_ref(rows, "rows")? = m.inner.cfg.output_len();
        *out_ref(cols, "cols")? = m.inner.cfg.d_out;
        Ok(())
    })
}

/// Maps a row-major feature matrix to a row-major prefix. `out_len` must be
/// at least the output rows times columns.
///
/// # Safety
/// `features` must point to `rows * cols` doubles and `out` to `out_len`.
#[no_mangle]
pub unsafe extern "C" fn mapl_mapper_map(
    mapper: *const MaplMapper,
    features: *const f64,
    rows: usize,
    cols: usize,
    out: *mut f64,
    out_len: usize,
) -> MaplStatus {
    guard(|| {
        let m = mapper.as_ref().ok_or_else(|| null("mapper"))?;
        if features.is_null() {
            return Err(null("features"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let needed = m.inner.cfg.output_len() * m.inner.cfg.d_out;
        if out_len < needed {
            return Err(Failure(
                MaplStatus::BufferTooSmall,
                format!("output buffer holds {out_len} values, {needed} required"),
            ));
        }
        let data = std::slice::from_raw_parts(features, rows * cols).to_vec();
        let feats = VisualFeatures(Tensor::new(vec![rows, cols], data)?);
        let prefix = m.inner.map(&feats)?;
        std::slice::from_raw_parts_mut(out, needed).copy_from_slice(prefix.0.data());
        Ok(())
    })
}

/// Loads the fixture backbones in `fixtures_dir` together with a mapper
/// checkpoint trained against them.
///
/// # Safety
/// `fixtures_dir` and `checkpoint` must be nul-terminated strings and `out`
/// a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn mapl_pipeline_load(
    fixtures_dir: *const c_char,
    checkpoint: *const c_char,
    out: *mut *mut MaplPipeline,
) -> MaplStatus {
    guard(|| {
        let dir = str_arg(fixtures_dir, "fixtures_dir")?;
        let checkpoint = str_arg(checkpoint, "checkpoint")?;
        let out = out_ref(out, "out")?;
        let backbones = Backbones::load(Path::new(dir))?;
        let mapper = load_mapper(checkpoint)?;
        if mapper.cfg.d_in != backbones.d_in() || mapper.cfg.d_out != backbones.lm_cfg.d_model {
            return Err(Failure(
                MaplStatus::Config,
                format!(
                    "mapper maps {} -> {} but the backbones need {} -> {}",
                    mapper.cfg.d_in,
                    mapper.cfg.d_out,
                    backbones.d_in(),
                    backbones.lm_cfg.d_model
                ),
            ));
        }
        *out = Box::into_raw(Box::new(MaplPipeline { backbones, mapper }));
        Ok(())
    })
}

/// # Safety
/// `pipeline` must be NULL or a handle from [`mapl_pipeline_load`], freed once.
#[no_mangle]
pub unsafe extern "C" fn mapl_pipeline_free(pipeline: *mut MaplPipeline) {
    if !pipeline.is_null() {
        drop(Box::from_raw(pipeline));
    }
}

unsafe fn image_arg(p: &MaplPipeline, cells: *const u32, n_cells: usize) -> Result<ToyImage, Failure> {
    if cells.is_null() {
        return Err(null("cells"));
    }
    let cells: Vec<usize> = std::slice::from_raw_parts(cells, n_cells)
        .iter()
        .map(|&c| c as usize)
        .collect();
    if let Some(&bad) = cells.iter().find(|&&c| c >= p.backbones.colors) {
        return Err(Failure(
            MaplStatus::Data,
            format!("color {bad} outside 0..{}", p.backbones.colors),
        ));
    }
    let img = ToyImage::from_flat(cells)?;
    if img.grid() != p.backbones.grid {
        return Err(Failure(
            MaplStatus::Shape,
            format!("{}x{} image, backbones expect {}x{}", img.grid(), img.grid(), p.backbones.grid, p.backbones.grid),
        ));
    }
    Ok(img)
}

/// Greedy caption for a row-major grid of color indices. The caller frees
/// `*out` with [`mapl_string_free`].
///
/// # Safety
/// `cells` must point to `n_cells` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapl_pipeline_caption(
    pipeline: *const MaplPipeline,
    cells: *const u32,
    n_cells: usize,
    out: *mut *mut c_char,
) -> MaplStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        let img = image_arg(p, cells, n_cells)?;
        let out = out_ref(out, "out")?;
        *out = owned_string(inference::caption(&p.mapper, &p.backbones, &img)?)?;
        Ok(())
    })
}

/// Zero-shot answer to "color of `row` `col`?" about the given grid, with
/// 1-based coordinates. The caller frees `*out` with [`mapl_string_free`].
///
/// # Safety
/// `cells` must point to `n_cells` values and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn mapl_pipeline_answer_color(
    pipeline: *const MaplPipeline,
    cells: *const u32,
    n_cells: usize,
    row: usize,
    col: usize,
    out: *mut *mut c_char,
) -> MaplStatus {
    guard(|| {
        let p = pipeline.as_ref().ok_or_else(|| null("pipeline"))?;
        let img = image_arg(p, cells, n_cells)?;
        let valid = 1..=p.backbones.grid;
        if !valid.contains(&row) || !valid.contains(&col) {
            return Err(Failure(
                MaplStatus::Data,
                format!("cell ({row}, {col}) outside the {0}x{0} grid", p.backbones.grid),
            ));
        }
        let out = out_ref(out, "out")?;
        let query = VqaExample {
            image: img,
            question: question_text(row, col),
            answers: Vec::new(),
        };
        *out = owned_string(inference::answer(&p.mapper, &p.backbones, &[], &query)?)?;
        Ok(())
    })
}

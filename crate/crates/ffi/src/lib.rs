//! C ABI over the batchgemba core: token counting, batch-response parsing,
//! severity scoring, span-preserving compression, correlation, and prompt
//! rendering behind an opaque template handle.
//!
//! Conventions: functions return [`BgStatus`]; outputs go through out
//! pointers. Strings returned via `char**` are owned by the caller and must
//! be released with [`bg_string_free`]. [`bg_last_error`] describes the most
//! recent failure on the calling thread.

use std::cell::RefCell;
use std::ffi::{CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use batchgemba::compression::random_compress;
use batchgemba::dataset::EvalBatch;
use batchgemba::metaeval::pearson;
use batchgemba::mqm::{score_from_errors, PredictedError, SeverityWeights, TranslationExample};
use batchgemba::parser::parse_batch_response;
use batchgemba::prompt::{render_batch_prompt, schema_for, PromptTemplate};
use batchgemba::tokenizer::{RuleTokenizer, Tokenizer};
use libc::c_char;

/// Result of every fallible call in this interface.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BgStatus {
    /// The call succeeded and outputs are valid.
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Arguments were readable but semantically invalid; see bg_last_error.
    BadInput = 3,
    /// The library failed internally; see bg_last_error.
    Internal = 4,
}

/// Opaque prompt template handle; create with bg_template_default or
/// bg_template_from_json and release with bg_template_free.
pub struct BgTemplate {
    inner: PromptTemplate,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn fail(status: BgStatus, message: impl std::fmt::Display) -> BgStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = CString::new(text).unwrap_or_default();
    });
    status
}

fn guarded(body: impl FnOnce() -> BgStatus) -> BgStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(status) => status,
        Err(_) => fail(BgStatus::Internal, "internal panic"),
    }
}

/// # Safety
/// `ptr` must be null or a NUL-terminated string.
unsafe fn read_str<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, BgStatus> {
    if ptr.is_null() {
        return Err(fail(BgStatus::NullArgument, format!("{what} is null")));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map_err(|_| fail(BgStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

fn write_string(out: *mut *mut c_char, text: String) -> BgStatus {
    match CString::new(text) {
        Ok(owned) => {
            unsafe { *out = owned.into_raw() };
            BgStatus::Ok
        }
        Err(_) => fail(BgStatus::Internal, "output contained a NUL byte"),
    }
}

/// Library version as a static string; never freed by the caller.
#[no_mangle]
pub extern "C" fn bg_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the most recent failure on the calling thread. The pointer
/// stays valid until the next failing call on the same thread; do not free.
#[no_mangle]
pub extern "C" fn bg_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

/// Releases a string returned through a `char**` output.
///
/// # Safety
/// `text` must be null or a pointer previously returned by this library and
/// not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bg_string_free(text: *mut c_char) {
    if !text.is_null() {
        drop(CString::from_raw(text));
    }
}

/// Counts tokens in `text` with the deterministic rule tokenizer: runs of
/// alphanumeric characters are one token, CJK-like characters one token
/// each, other non-space characters one token apiece.
///
/// # Safety
/// `text` must be null or NUL-terminated; `out` must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bg_token_count(text: *const c_char, out: *mut usize) -> BgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BgStatus::NullArgument, "out is null");
        }
        let text = match read_str(text, "text") {
            Ok(text) => text,
            Err(status) => return status,
        };
        *out = RuleTokenizer.count(text);
        BgStatus::Ok
    })
}

/// Pearson correlation of two equal-length samples of at least two points.
///
/// # Safety
/// `xs` and `ys` must be null or point to `len` readable doubles; `out`
/// must be null or writable.
#[no_mangle]
pub unsafe extern "C" fn bg_pearson(
    xs: *const f64,
    ys: *const f64,
    len: usize,
    out: *mut f64,
) -> BgStatus {
    guarded(|| {
        if xs.is_null() || ys.is_null() || out.is_null() {
            return fail(BgStatus::NullArgument, "xs, ys, and out must be non-null");
        }
        let xs = std::slice::from_raw_parts(xs, len);
        let ys = std::slice::from_raw_parts(ys, len);
        match pearson(xs, ys) {
            Ok(r) => {
                *out = r;
                BgStatus::Ok
            }
            Err(error) => fail(BgStatus::BadInput, error),
        }
    })
}

/// Scores a JSON array of MQM errors (`[{"severity": "minor|major|critical",
/// "category": "...", "span": "..."}]`) with the default severity weights:
/// the negated, capped weight sum, and 0 for an empty array.
///
/// # Safety
/// `errors_json` must be null or NUL-terminated; `out` must be null or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn bg_score_errors(errors_json: *const c_char, out: *mut f64) -> BgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BgStatus::NullArgument, "out is null");
        }
        let text = match read_str(errors_json, "errors_json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        let errors: Vec<PredictedError> = match serde_json::from_str(text) {
            Ok(errors) => errors,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        *out = score_from_errors(&errors, &SeverityWeights::default());
        BgStatus::Ok
    })
}

/// Parses a model response for a batch of `batch_size` examples. The result
/// is a JSON object `{"outcomes": [...], "diagnostics": [...]}` with exactly
/// `batch_size` outcomes, each either parsed errors or a malform reason.
///
/// # Safety
/// `text` must be null or NUL-terminated; `out_json` must be null or
/// writable. On success `*out_json` must be freed with bg_string_free.
#[no_mangle]
pub unsafe extern "C" fn bg_parse_batch_response(
    text: *const c_char,
    batch_size: usize,
    out_json: *mut *mut c_char,
) -> BgStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(BgStatus::NullArgument, "out_json is null");
        }
        let text = match read_str(text, "text") {
            Ok(text) => text,
            Err(status) => return status,
        };
        let schema = match schema_for(batch_size) {
            Ok(schema) => schema,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let parsed = parse_batch_response(text, &schema);
        let payload = serde_json::json!({
            "outcomes": parsed.outcomes,
            "diagnostics": parsed.diagnostics,
        });
        write_string(out_json, payload.to_string())
    })
}

/// Compresses one example (`{"id", "src_lang", "tgt_lang", "source",
/// "target", "human_score"?, "spans"?}`) by randomly removing about `ratio`
/// of each side's tokens, never touching tokens inside annotated spans.
/// Deterministic per seed. Returns `{"source", "target", "achieved_ratio"}`.
///
/// # Safety
/// `example_json` must be null or NUL-terminated; `out_json` must be null or
/// writable. On success `*out_json` must be freed with bg_string_free.
#[no_mangle]
pub unsafe extern "C" fn bg_compress_example(
    example_json: *const c_char,
    ratio: f64,
    seed: u64,
    out_json: *mut *mut c_char,
) -> BgStatus {
    guarded(|| {
        if out_json.is_null() {
            return fail(BgStatus::NullArgument, "out_json is null");
        }
        let text = match read_str(example_json, "example_json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        let example: TranslationExample = match serde_json::from_str(text) {
            Ok(example) => example,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        if let Err(error) = example.validate() {
            return fail(BgStatus::BadInput, error);
        }
        let batch = match EvalBatch::new("ffi", vec![example]) {
            Ok(batch) => batch,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let candidate = match random_compress(&batch, ratio, seed) {
            Ok(candidate) => candidate,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let (source, target) = &candidate.compressed_examples[0];
        let payload = serde_json::json!({
            "source": source,
            "target": target,
            "achieved_ratio": candidate.achieved_ratio,
        });
        write_string(out_json, payload.to_string())
    })
}

/// Creates a template handle for the shipped default prompt template.
///
/// # Safety
/// `out` must be null or writable. On success the handle must be released
/// with bg_template_free.
#[no_mangle]
pub unsafe extern "C" fn bg_template_default(out: *mut *mut BgTemplate) -> BgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BgStatus::NullArgument, "out is null");
        }
        let handle = Box::new(BgTemplate {
            inner: PromptTemplate::shipped_default(),
        });
        *out = Box::into_raw(handle);
        BgStatus::Ok
    })
}

/// Creates a template handle from template JSON (same shape as the shipped
/// template file: instruction, fewshot examples, a per-example frame with
/// the five placeholders, and output instructions).
///
/// # Safety
/// `json` must be null or NUL-terminated; `out` must be null or writable.
/// On success the handle must be released with bg_template_free.
#[no_mangle]
pub unsafe extern "C" fn bg_template_from_json(
    json: *const c_char,
    out: *mut *mut BgTemplate,
) -> BgStatus {
    guarded(|| {
        if out.is_null() {
            return fail(BgStatus::NullArgument, "out is null");
        }
        let text = match read_str(json, "json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        match PromptTemplate::from_json(text) {
            Ok(template) => {
                *out = Box::into_raw(Box::new(BgTemplate { inner: template }));
                BgStatus::Ok
            }
            Err(error) => fail(BgStatus::BadInput, error),
        }
    })
}

/// Releases a template handle.
///
/// # Safety
/// `template` must be null or a handle from this library not yet freed.
#[no_mangle]
pub unsafe extern "C" fn bg_template_free(template: *mut BgTemplate) {
    if !template.is_null() {
        drop(Box::from_raw(template));
    }
}

/// Renders the batched evaluation prompt for `{"batch_id", "examples"}`.
/// All examples must share one language pair; batch size is capped. Returns
/// `{"messages": [{"role", "content"}, ...], "token_count", "batch_size"}`
/// with the four-message layout: instruction, demonstration batch,
/// demonstration answer, and the target batch.
///
/// # Safety
/// `template` must be a live handle from this library; `batch_json` must be
/// null or NUL-terminated; `out_json` must be null or writable. On success
/// `*out_json` must be freed with bg_string_free.
#[no_mangle]
pub unsafe extern "C" fn bg_render_prompt(
    template: *const BgTemplate,
    batch_json: *const c_char,
    out_json: *mut *mut c_char,
) -> BgStatus {
    guarded(|| {
        if template.is_null() || out_json.is_null() {
            return fail(BgStatus::NullArgument, "template and out_json must be non-null");
        }
        let text = match read_str(batch_json, "batch_json") {
            Ok(text) => text,
            Err(status) => return status,
        };
        let value: serde_json::Value = match serde_json::from_str(text) {
            Ok(value) => value,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let batch_id = match value.get("batch_id").and_then(|v| v.as_str()) {
            Some(id) => id.to_string(),
            None => return fail(BgStatus::BadInput, "batch_json needs a string batch_id"),
        };
        let examples: Vec<TranslationExample> = match value
            .get("examples")
            .cloned()
            .map(serde_json::from_value)
        {
            Some(Ok(examples)) => examples,
            Some(Err(error)) => return fail(BgStatus::BadInput, error),
            None => return fail(BgStatus::BadInput, "batch_json needs an examples array"),
        };
        for example in &examples {
            if let Err(error) = example.validate() {
                return fail(BgStatus::BadInput, error);
            }
        }
        let batch = match EvalBatch::new(batch_id, examples) {
            Ok(batch) => batch,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let template = &(*template).inner;
        let bundle = match render_batch_prompt(&batch, template, &RuleTokenizer) {
            Ok(bundle) => bundle,
            Err(error) => return fail(BgStatus::BadInput, error),
        };
        let payload = serde_json::json!({
            "messages": bundle.messages,
            "token_count": bundle.token_count,
            "batch_size": bundle.batch_size,
        });
        write_string(out_json, payload.to_string())
    })
}

//! C ABI over prunekit models, attention scoring and the threshold controller.
//!
//! Every fallible function returns a [`PkStatus`]; on failure the message is
//! kept per thread and can be read with [`pk_last_error_message`]. Objects are
//! opaque handles released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use prunekit::attention::{attention_of_map, AttentionFunction};
use prunekit::controller::{Action, Controller, ControllerConfig, Observed, Policy, Termination};
use prunekit::model::{export_compact, load_checkpoint, save_checkpoint, total_accounting};
use prunekit::rng::RngState;
use prunekit::{Architecture, Dims, Error, ModelState, Shape, Tensor4D};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Shape = 3,
    Io = 4,
    Checkpoint = 5,
    Config = 6,
    Policy = 7,
    UnsupportedTopology = 8,
    Internal = 9,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkAttentionFunction {
    Mean = 0,
    Max = 1,
    Sum = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkPolicyKind {
    AccuracyGuaranteed = 0,
    MemoryConstrained = 1,
    FlopsConstrained = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkAction {
    Continue = 0,
    Rollback = 1,
    Terminate = 2,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PkTermination {
    None = 0,
    Converged = 1,
    Failed = 2,
    BudgetExhausted = 3,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PkAccounting {
    pub total_params: u64,
    pub total_flops: u64,
    pub conv_params: u64,
    pub conv_flops: u64,
    pub linear_params: u64,
    pub linear_flops: u64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkControllerConfig {
    pub initial_t: f64,
    pub initial_lambda: f64,
    pub convergence_window: u32,
    pub convergence_tol: f64,
    pub max_rollbacks: u32,
    pub exponent_base: u32,
    pub max_rounds: u32,
}

/// Metrics of one pruning round. A NaN `acc_loss` or a negative value in
/// any other field means "not measured".
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkObservation {
    pub acc_loss: f64,
    pub param_reduction: f64,
    pub flops_reduction: f64,
    pub current_params: i64,
    pub current_flops: i64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PkDecision {
    pub action: PkAction,
    pub rollback_round: u32,
    pub termination: PkTermination,
    pub acceptable: bool,
    pub next_t: f64,
    pub next_lambda: f64,
}

/// Opaque model handle.
pub struct PkModel(ModelState);

/// Opaque controller handle.
pub struct PkController(Controller);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> PkStatus {
    match e {
        Error::Shape { .. } | Error::InvalidShape(_) => PkStatus::Shape,
        Error::Io { .. } => PkStatus::Io,
        Error::Checkpoint(_) => PkStatus::Checkpoint,
        Error::Config(_) | Error::Validation { .. } | Error::Json(_) | Error::Data(_) => PkStatus::Config,
        Error::Policy(_) => PkStatus::Policy,
        Error::UnsupportedTopology(_) => PkStatus::UnsupportedTopology,
        Error::Accounting(_) => PkStatus::InvalidArgument,
    }
}

struct Fail(PkStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(PkStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Fail {
    Fail(PkStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> PkStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            PkStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            PkStatus::Internal
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("{what} is not valid UTF-8")))
}

unsafe fn model_ref<'a>(m: *const PkModel) -> Result<&'a ModelState, Fail> {
    m.as_ref().map(|m| &m.0).ok_or_else(|| null("model"))
}

unsafe fn model_mut<'a>(m: *mut PkModel) -> Result<&'a mut ModelState, Fail> {
    m.as_mut().map(|m| &mut m.0).ok_or_else(|| null("model"))
}

unsafe fn write_out<T>(out: *mut T, value: T) -> Result<(), Fail> {
    if out.is_null() {
        return Err(null("output pointer"));
    }
    out.write(value);
    Ok(())
}

/// Copies the calling thread's last error message into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length in bytes.
///
/// # Safety
/// `buf` must be null or valid for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn pk_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr().cast::<c_char>(), buf, n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Builds a freshly initialized model: `arch` is `toy4`, `toy2` or `vgg_tiny`.
///
/// # Safety
/// `arch` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_new(
    arch: *const c_char,
    channels: usize,
    height: usize,
    width: usize,
    classes: usize,
    seed: u64,
    out: *mut *mut PkModel,
) -> PkStatus {
    guard(|| {
        let name = str_arg(arch, "arch")?;
        let a = Architecture::named(name, Shape::new(channels, height, width), classes)?;
        let m = ModelState::init(a, &RngState::new(seed))?;
        write_out(out, Box::into_raw(Box::new(PkModel(m))))
    })
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_load(path: *const c_char, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let p = str_arg(path, "path")?;
        let m = load_checkpoint(p)?;
        write_out(out, Box::into_raw(Box::new(PkModel(m))))
    })
}

/// # Safety
/// `model` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn pk_model_save(model: *const PkModel, path: *const c_char) -> PkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let p = str_arg(path, "path")?;
        save_checkpoint(m, p)?;
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_model_free(model: *mut PkModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_accounting(model: *const PkModel, out: *mut PkAccounting) -> PkStatus {
    guard(|| {
        let a = total_accounting(model_ref(model)?);
        write_out(
            out,
            PkAccounting {
                total_params: a.total_params,
                total_flops: a.total_flops,
                conv_params: a.conv_params,
                conv_flops: a.conv_flops,
                linear_params: a.linear_params,
                linear_flops: a.linear_flops,
            },
        )
    })
}

/// Floats per input sample (`C·H·W`) and per output row (classes).
///
/// # Safety
/// `model` must be a live handle; both outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pk_model_io_len(model: *const PkModel, input_len: *mut usize, output_len: *mut usize) -> PkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let out_shape = m.arch.output_shape()?;
        write_out(input_len, m.arch.input.len())?;
        write_out(output_len, out_shape.len())
    })
}

/// Masked forward pass on `batch` samples laid out NCHW; writes `batch·classes` logits.
///
/// # Safety
/// `input` must hold `input_len` floats and `output` `output_len` floats.
#[no_mangle]
pub unsafe extern "C" fn pk_model_forward(
    model: *const PkModel,
    input: *const f32,
    input_len: usize,
    batch: usize,
    output: *mut f32,
    output_len: usize,
) -> PkStatus {
    guard(|| {
        let m = model_ref(model)?;
        if input.is_null() || output.is_null() {
            return Err(null("buffer"));
        }
        let s = m.arch.input;
        let need = batch * s.len();
        if batch == 0 || input_len != need {
            return Err(Fail(
                PkStatus::Shape,
                format!("input holds {input_len} floats, expected {need}"),
            ));
        }
        let x = Tensor4D::from_vec(
            Dims::new(batch, s.c, s.h, s.w),
            std::slice::from_raw_parts(input, input_len).to_vec(),
        )?;
        let y = m.logits(&x)?;
        if y.data().len() != output_len {
            return Err(Fail(
                PkStatus::Shape,
                format!("output holds {output_len} floats, expected {}", y.data().len()),
            ));
        }
        ptr::copy_nonoverlapping(y.data().as_ptr(), output, output_len);
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_num_conv(model: *const PkModel, out: *mut usize) -> PkStatus {
    guard(|| write_out(out, model_ref(model)?.num_conv()))
}

/// Total and live filter counts of conv layer `conv` (0-based among conv layers).
///
/// # Safety
/// `model` must be a live handle; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pk_model_filters(model: *const PkModel, conv: usize, total: *mut usize, live: *mut usize) -> PkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let mask = m
            .masks
            .get(conv)
            .ok_or_else(|| invalid(format!("conv layer {conv} out of range")))?;
        write_out(total, mask.len())?;
        write_out(live, mask.live_count())
    })
}

/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_is_live(model: *const PkModel, conv: usize, filter: usize, out: *mut bool) -> PkStatus {
    guard(|| {
        let m = model_ref(model)?;
        let mask = m
            .masks
            .get(conv)
            .filter(|mk| filter < mk.len())
            .ok_or_else(|| invalid(format!("filter {filter} of conv layer {conv} out of range")))?;
        write_out(out, mask.is_live(filter))
    })
}

/// Prunes one filter. Refuses to prune the last live filter of a layer.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn pk_model_prune_filter(model: *mut PkModel, conv: usize, filter: usize) -> PkStatus {
    guard(|| {
        let m = model_mut(model)?;
        let mut masks = m.masks.clone();
        let mask = masks
            .get_mut(conv)
            .filter(|mk| filter < mk.len())
            .ok_or_else(|| invalid(format!("filter {filter} of conv layer {conv} out of range")))?;
        if mask.is_live(filter) && mask.live_count() == 1 {
            return Err(invalid(format!(
                "filter {filter} is the last live filter of conv layer {conv}"
            )));
        }
        mask.prune(filter);
        m.set_masks(masks)?;
        Ok(())
    })
}

/// Physically removes pruned filters into a new model handle.
///
/// # Safety
/// `model` must be a live handle; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_model_export_compact(model: *const PkModel, out: *mut *mut PkModel) -> PkStatus {
    guard(|| {
        let c = export_compact(model_ref(model)?)?;
        write_out(out, Box::into_raw(Box::new(PkModel(c))))
    })
}

/// Attention score of one feature map.
///
/// # Safety
/// `map` must hold `len` floats; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_attention_of_map(
    map: *const f32,
    len: usize,
    function: PkAttentionFunction,
    p: f64,
    out: *mut f64,
) -> PkStatus {
    guard(|| {
        if map.is_null() {
            return Err(null("map"));
        }
        if len == 0 {
            return Err(invalid("empty feature map"));
        }
        if !(p.is_finite() && p > 0.0) {
            return Err(invalid(format!("p must be a positive finite number (got {p})")));
        }
        let f = match function {
            PkAttentionFunction::Mean => AttentionFunction::Mean,
            PkAttentionFunction::Max => AttentionFunction::Max,
            PkAttentionFunction::Sum => AttentionFunction::Sum,
        };
        write_out(out, attention_of_map(std::slice::from_raw_parts(map, len), f, p))
    })
}

#[no_mangle]
pub extern "C" fn pk_controller_default_config() -> PkControllerConfig {
    let c = ControllerConfig::default();
    PkControllerConfig {
        initial_t: c.initial_t,
        initial_lambda: c.initial_lambda,
        convergence_window: c.convergence_window as u32,
        convergence_tol: c.convergence_tol,
        max_rollbacks: c.max_rollbacks,
        exponent_base: c.exponent_base,
        max_rounds: c.max_rounds as u32,
    }
}

/// `config` may be null for the defaults. `baseline_size` is the unpruned
/// parameter or FLOP count, matching the policy's size measure.
///
/// # Safety
/// `config` must be null or valid for a read; `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_controller_new(
    kind: PkPolicyKind,
    target: f64,
    config: *const PkControllerConfig,
    baseline_size: u64,
    out: *mut *mut PkController,
) -> PkStatus {
    guard(|| {
        let policy = match kind {
            PkPolicyKind::AccuracyGuaranteed => Policy::accuracy(target),
            PkPolicyKind::MemoryConstrained => Policy::memory(target),
            PkPolicyKind::FlopsConstrained => Policy::flops(target),
        };
        let c = config.as_ref().copied().unwrap_or_else(|| pk_controller_default_config());
        let cfg = ControllerConfig {
            initial_t: c.initial_t,
            initial_lambda: c.initial_lambda,
            convergence_window: c.convergence_window as usize,
            convergence_tol: c.convergence_tol,
            max_rollbacks: c.max_rollbacks,
            exponent_base: c.exponent_base,
            max_rounds: c.max_rounds as usize,
        };
        let ctrl = Controller::new(policy, cfg, baseline_size)?;
        write_out(out, Box::into_raw(Box::new(PkController(ctrl))))
    })
}

/// # Safety
/// `ctrl` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn pk_controller_free(ctrl: *mut PkController) {
    if !ctrl.is_null() {
        drop(Box::from_raw(ctrl));
    }
}

/// Threshold and step size for the next pruning round.
///
/// # Safety
/// `ctrl` must be a live handle; outputs valid for writes.
#[no_mangle]
pub unsafe extern "C" fn pk_controller_state(
    ctrl: *const PkController,
    t: *mut f64,
    lambda: *mut f64,
    round: *mut u32,
) -> PkStatus {
    guard(|| {
        let c = &ctrl.as_ref().ok_or_else(|| null("controller"))?.0;
        write_out(t, c.threshold())?;
        write_out(lambda, c.state.lambda)?;
        write_out(round, c.round() as u32)
    })
}

/// Feeds one round's measurements and returns the controller's decision.
///
/// # Safety
/// `ctrl` must be a live handle; `obs` valid for a read; `out` for a write.
#[no_mangle]
pub unsafe extern "C" fn pk_controller_observe(
    ctrl: *mut PkController,
    obs: *const PkObservation,
    out: *mut PkDecision,
) -> PkStatus {
    guard(|| {
        let c = &mut ctrl.as_mut().ok_or_else(|| null("controller"))?.0;
        let o = obs.as_ref().ok_or_else(|| null("observation"))?;
        let f = |v: f64| (v >= 0.0).then_some(v);
        let u = |v: i64| u64::try_from(v).ok();
        let observed = Observed {
            acc_loss: (!o.acc_loss.is_nan()).then_some(o.acc_loss),
            param_reduction: f(o.param_reduction),
            flops_reduction: f(o.flops_reduction),
            current_params: u(o.current_params),
            current_flops: u(o.current_flops),
        };
        let d = c.observe(&observed, None)?;
        let (action, rollback_round, termination) = match d.action {
            Action::Continue => (PkAction::Continue, 0, PkTermination::None),
            Action::Rollback { to_round } => (PkAction::Rollback, to_round as u32, PkTermination::None),
            Action::Terminate { status } => (
                PkAction::Terminate,
                0,
                match status {
                    Termination::Converged => PkTermination::Converged,
                    Termination::Failed => PkTermination::Failed,
                    Termination::BudgetExhausted => PkTermination::BudgetExhausted,
                },
            ),
        };
        write_out(
            out,
            PkDecision {
                action,
                rollback_round,
                termination,
                acceptable: d.acceptable,
                next_t: d.next_t,
                next_lambda: d.next_lambda,
            },
        )
    })
}

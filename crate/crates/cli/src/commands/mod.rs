mod attn;
mod checks;
mod experiments;

pub use attn::dump_attn;
pub use checks::{bench, equiv, gradcheck};
pub use experiments::{eval_length, gen_task, train};

//! Prompt templates with `{{name}}` placeholders.
//!
//! Defaults are compiled in from `prompts/`; a directory of same-named
//! `.txt` files can override any of them at runtime.

use std::path::Path;

macro_rules! prompt_set {
    ($($field:ident => $file:literal),* $(,)?) => {
        #[derive(Debug, Clone, PartialEq, Eq)]
        pub struct PromptSet {
            $(pub $field: String,)*
        }

        impl Default for PromptSet {
            fn default() -> Self {
                PromptSet {
                    $($field: include_str!(concat!("../prompts/", $file)).to_string(),)*
                }
            }
        }

        impl PromptSet {
            /// Defaults, with any `<name>.txt` found in `dir` taking precedence.
            pub fn load(dir: Option<&Path>) -> std::io::Result<Self> {
                let mut set = PromptSet::default();
                if let Some(dir) = dir {
                    $(
                        let path = dir.join($file);
                        if path.is_file() {
                            set.$field = std::fs::read_to_string(&path)?;
                        }
                    )*
                }
                Ok(set)
            }

            pub fn names() -> &'static [&'static str] {
                &[$($file),*]
            }
        }
    };
}

prompt_set! {
    judge => "judge.txt",
    agent => "agent.txt",
    agent_multi => "agent_multi.txt",
    agent_refine => "agent_refine.txt",
    agent_execute => "agent_execute.txt",
    gym_scene => "gym_scene.txt",
    gym_event => "gym_event.txt",
    seed_jobs => "seed_jobs.txt",
    scenario_job => "scenario_job.txt",
    scenario_entities => "scenario_entities.txt",
    scenario_details => "scenario_details.txt",
    scenario_examples => "scenario_examples.txt",
    user_agent => "user_agent.txt",
    user_activity => "user_activity.txt",
    status_update => "status_update.txt",
    status_input => "status_input.txt",
    render_event => "render_event.txt",
    explain => "explain.txt",
}

/// Substitute `{{key}}` placeholders. Unknown placeholders are left as is.
pub fn fill(template: &str, vars: &[(&str, &str)]) -> String {
    let mut out = template.to_string();
    for (key, value) in vars {
        out = out.replace(&format!("{{{{{key}}}}}"), value);
    }
    out
}

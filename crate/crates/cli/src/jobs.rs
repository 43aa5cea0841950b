use std::collections::VecDeque;
use std::process::Command;
use std::sync::Mutex;

/// Run `commands` with at most `jobs` child processes alive at once.
/// Returns each command's exit status in input order (`None` if it could
/// not be spawned).
pub fn run_parallel(commands: Vec<Command>, jobs: usize) -> Vec<Option<i32>> {
    let n = commands.len();
    let queue = Mutex::new(commands.into_iter().enumerate().collect::<VecDeque<_>>());
    let results = Mutex::new(vec![None; n]);
    std::thread::scope(|s| {
        for _ in 0..jobs.clamp(1, n.max(1)) {
            s.spawn(|| loop {
                let Some((i, mut cmd)) = queue.lock().unwrap().pop_front() else {
                    break;
                };
                let status = match cmd.status() {
                    Ok(st) => Some(st.code().unwrap_or(1)),
                    Err(e) => {
                        log::error!("could not start worker: {e}");
                        None
                    }
                };
                results.lock().unwrap()[i] = status;
            });
        }
    });
    results.into_inner().unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sh(script: &str) -> Command {
        let mut c = Command::new("sh");
        c.args(["-c", script]);
        c
    }

    #[test]
    fn statuses_keep_input_order() {
        let cmds = vec![sh("exit 3"), sh("exit 0"), sh("exit 1"), sh("exit 0")];
        assert_eq!(run_parallel(cmds, 2), vec![Some(3), Some(0), Some(1), Some(0)]);
    }

    #[test]
    fn missing_program_is_none() {
        let cmds = vec![Command::new("/nonexistent/worker")];
        assert_eq!(run_parallel(cmds, 4), vec![None]);
    }
}

//! Line-oriented rendering shared by the subcommands.

use std::collections::BTreeMap;

use flowgate_api::views::TaskView;
use flowgate_core::registry::StateMap;
use flowgate_core::{Event, TaskState};

/// `  12 14:03:07.512 training_task#1      Submitted -> Running  pid 4242`
pub fn event_line(e: &Event) -> String {
    let from = e.from.map_or("(new)".to_string(), |s| s.to_string());
    format!(
        "{:>4} {} {:<28} {:>16} -> {:<16} {}",
        e.seq,
        e.timestamp.format("%H:%M:%S%.3f"),
        e.instance.to_string(),
        from,
        e.to.to_string(),
        e.detail
    )
    .trim_end()
    .to_string()
}

/// Aligned table; the last column is left unpadded.
pub fn table(header: &[&str], rows: &[Vec<String>]) -> String {
    let mut widths: Vec<usize> = header.iter().map(|h| h.len()).collect();
    for row in rows {
        for (i, cell) in row.iter().enumerate() {
            widths[i] = widths[i].max(cell.chars().count());
        }
    }
    let render = |cells: Vec<&str>| {
        let last = cells.len() - 1;
        let mut line = String::new();
        for (i, cell) in cells.into_iter().enumerate() {
            if i == last {
                line.push_str(cell);
            } else {
                line.push_str(&format!("{cell:<w$}  ", w = widths[i]));
            }
        }
        line.trim_end().to_string()
    };
    let mut out = render(header.to_vec());
    for row in rows {
        out.push('\n');
        out.push_str(&render(row.iter().map(String::as_str).collect()));
    }
    out
}

pub fn task_table(tasks: &[TaskView]) -> String {
    let rows: Vec<Vec<String>> = tasks
        .iter()
        .map(|t| {
            vec![
                t.id.to_string(),
                t.state.to_string(),
                t.execsite.clone().unwrap_or_default(),
                t.detail.clone(),
            ]
        })
        .collect();
    table(&["INSTANCE", "STATE", "SITE", "DETAIL"], &rows)
}

/// `3 Succeeded, 1 Failed`
pub fn state_counts(states: &StateMap) -> String {
    let mut counts: BTreeMap<TaskState, usize> = BTreeMap::new();
    for s in states.values() {
        *counts.entry(*s).or_default() += 1;
    }
    count_summary(&counts)
}

pub fn count_summary(counts: &BTreeMap<TaskState, usize>) -> String {
    if counts.is_empty() {
        return "no instances".to_string();
    }
    counts
        .iter()
        .map(|(s, n)| format!("{n} {s}"))
        .collect::<Vec<_>>()
        .join(", ")
}

pub fn print_json<T: serde::Serialize>(value: &T) -> anyhow::Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

// HTML builders. Pure string in, string out, so the render logic is
// testable without a browser; main.ts owns the actual DOM.

import type { CalibrationDelta, GenerationView } from './api.js';
import type { AppState, RunPanel } from './state.js';
import { currentItem, effectiveFlag, impactBadges } from './state.js';

export function escapeHtml(text: string): string {
  return text
    .replace(/&/g, '&amp;')
    .replace(/</g, '&lt;')
    .replace(/>/g, '&gt;')
    .replace(/"/g, '&quot;')
    .replace(/'/g, '&#39;');
}

/** "0.562" -> "56.20". Display only; the number itself comes from a report. */
export function pct(value: number): string {
  return (value * 100).toFixed(2);
}

/** Signed percent for delta chips, e.g. "+28.42". */
export function signedPct(value: number): string {
  const text = (value * 100).toFixed(2);
  return value >= 0 ? `+${text}` : text;
}

function statusChip(status: string): string {
  return `<span class="chip chip-${escapeHtml(status)}">${escapeHtml(status)}</span>`;
}

export function galleryCard(state: AppState, gen: GenerationView, index: number): string {
  const flag = effectiveFlag(state, gen);
  const active = index === state.cursor ? ' card-active' : '';
  const img = gen.image_url
    ? `<img src="${escapeHtml(gen.image_url)}" alt="generation ${gen.prompt_no}" loading="lazy">`
    : '<div class="no-image">no image</div>';
  const attempt = gen.attempt > 0 ? `<span class="chip chip-retry">r${gen.attempt}</span>` : '';
  const pressed = (cat: string) => (flag === cat ? ' pressed' : '');
  const error = gen.error ? `<p class="error-text">${escapeHtml(gen.error)}</p>` : '';
  const regen =
    gen.status === 'flagged'
      ? `<button data-action="regen" data-gen="${escapeHtml(gen.generation_id)}">regenerate</button>`
      : '';
  const clear = flag
    ? `<button data-action="clear-flag" data-flag-id="g:${escapeHtml(gen.generation_id)}">unflag</button>`
    : '';
  return `
  <div class="card${active}" data-index="${index}" data-gen="${escapeHtml(gen.generation_id)}">
    ${img}
    <p class="card-prompt">${escapeHtml(gen.prompt_text)}</p>
    <div class="card-meta">#${gen.prompt_no} ${statusChip(gen.status)} ${attempt}</div>
    ${error}
    <div class="card-actions">
      <button class="flag-btn${pressed('wrong_category')}"
        data-action="flag" data-gen="${escapeHtml(gen.generation_id)}"
        data-category="wrong_category">wrong category</button>
      <button class="flag-btn${pressed('poor_composition')}"
        data-action="flag" data-gen="${escapeHtml(gen.generation_id)}"
        data-category="poor_composition">poor composition</button>
      ${clear}
      ${regen}
    </div>
  </div>`;
}

export function gallery(state: AppState): string {
  if (!state.classId) return '<p class="hint">pick a class to review</p>';
  if (state.generations.length === 0) {
    return '<p class="hint">no generations for this class yet</p>';
  }
  const cards = state.generations
    .map((gen, i) => galleryCard(state, gen, i))
    .join('\n');
  const bulk = `
  <div class="bulk-actions">
    <span>whole class:</span>
    <button data-action="bulk-flag" data-category="wrong_category">flag all wrong</button>
    <button data-action="bulk-flag" data-category="poor_composition">flag all poor</button>
  </div>`;
  return `${bulk}<div class="gallery">${cards}</div>`;
}

export function promptPanel(state: AppState): string {
  const set = state.prompts;
  if (!set) return '';
  const rows = set.prompts
    .map((p) => {
      const flagged = p.status.startsWith('flagged_');
      const flagId = `p:${set.dataset_id}:${set.class_id}:${p.no}`;
      const replacement = p.replacement_text ?? '';
      const clear = flagged
        ? `<button data-action="clear-flag" data-flag-id="${escapeHtml(flagId)}">unflag</button>`
        : '';
      return `
    <div class="prompt-row" data-no="${p.no}">
      <div class="prompt-head">#${p.no} ${statusChip(p.status)}</div>
      <p class="prompt-original" title="original model output">${escapeHtml(p.text)}</p>
      <textarea class="prompt-replacement" data-no="${p.no}"
        placeholder="corrected prompt">${escapeHtml(replacement)}</textarea>
      <div class="prompt-actions">
        <button data-action="save-prompt" data-no="${p.no}">save correction</button>
        <button data-action="flag-prompt" data-no="${p.no}"
          data-category="wrong_category">flag wrong</button>
        <button data-action="flag-prompt" data-no="${p.no}"
          data-category="poor_composition">flag poor</button>
        ${clear}
      </div>
    </div>`;
    })
    .join('\n');
  const deficient = set.deficient
    ? `<p class="error-text">prompt set incomplete, missing: ${set.gaps.join(', ')}</p>`
    : '';
  return `<section class="prompts"><h2>prompts</h2>${deficient}${rows}</section>`;
}

export function deltaChips(delta: CalibrationDelta): string {
  return `
  <div class="delta-chips">
    <span class="chip chip-delta">Δ overall ${signedPct(delta.delta_overall)}</span>
    <span class="chip chip-delta">Δ macro ${signedPct(delta.delta_macro)}</span>
  </div>`;
}

function runSlot(label: string, slot: { run_id: string; report: { overall: number; macro: number } } | null): string {
  if (!slot) return `<div class="run-slot"><h3>${label}</h3><p class="hint">not run yet</p></div>`;
  return `
  <div class="run-slot">
    <h3>${label}</h3>
    <p>overall <strong>${pct(slot.report.overall)}</strong></p>
    <p>macro <strong>${pct(slot.report.macro)}</strong></p>
    <p class="run-id">${escapeHtml(slot.run_id)}</p>
  </div>`;
}

export function runPanel(panel: RunPanel): string {
  const badges = impactBadges(panel)
    .map(
      (b) => `
    <tr><td>${escapeHtml(b.classId)}</td>
      <td>${b.before ?? '–'}</td><td>${b.after ?? '–'}</td></tr>`,
    )
    .join('');
  const badgeTable = badges
    ? `<table class="impact"><thead>
    <tr><th>class</th><th>sources</th><th>calibrated</th></tr>
  </thead><tbody>${badges}</tbody></table>`
    : '';
  const busy = panel.busy ? ' disabled' : '';
  return `
  <section class="runs">
    <h2>runs</h2>
    <div class="run-form">
      <label>backend <input data-role="backend" value="${escapeHtml(panel.backend)}"></label>
      <label>images/class <input data-role="ng" type="number" min="1" value="${panel.ng}"></label>
      <label>scales <input data-role="scales" type="number" min="1" value="${panel.scales}"></label>
      <button data-action="run"${busy}>${panel.busy ? 'running…' : 'run both'}</button>
    </div>
    <div class="run-slots">
      ${runSlot('uncorrected', panel.uncorrected)}
      ${runSlot('calibrated', panel.calibrated)}
    </div>
    ${panel.delta ? deltaChips(panel.delta) : ''}
    ${badgeTable}
  </section>`;
}

function header(state: AppState): string {
  const datasetOptions = state.datasets
    .map(
      (d) =>
        `<option value="${escapeHtml(d)}"${d === state.dataset ? ' selected' : ''}>${escapeHtml(d)}</option>`,
    )
    .join('');
  const classOptions = state.classes
    .map((c) => {
      const counts = c.generations
        ? ` (${c.generations.done}/${c.generations.total}${c.generations.flagged ? `, ${c.generations.flagged} flagged` : ''})`
        : '';
      const selected = c.class_id === state.classId ? ' selected' : '';
      return `<option value="${escapeHtml(c.class_id)}"${selected}>${escapeHtml(c.class_name)}${counts}</option>`;
    })
    .join('');
  return `
  <header>
    <h1>prototype review</h1>
    <label>dataset <select data-role="dataset-select">
      <option value="">–</option>${datasetOptions}</select></label>
    <label>class <select data-role="class-select">
      <option value="">–</option>${classOptions}</select></label>
  </header>`;
}

function legend(): string {
  return `
  <footer class="legend">
    keys: <kbd>a</kbd> approve · <kbd>w</kbd> wrong category ·
    <kbd>c</kbd> poor composition · <kbd>j</kbd>/<kbd>space</kbd> next ·
    <kbd>k</kbd> previous
  </footer>`;
}

export function renderApp(state: AppState): string {
  const notice = state.notice
    ? `<div class="notice">${escapeHtml(state.notice)}</div>`
    : '';
  const item = currentItem(state);
  const position = item
    ? `<p class="hint">reviewing ${state.cursor + 1} of ${state.generations.length}</p>`
    : '';
  return `
  ${header(state)}
  ${notice}
  <main>
    <section class="review">${position}${gallery(state)}</section>
    ${promptPanel(state)}
    ${runPanel(state.runPanel)}
  </main>
  ${legend()}`;
}

// Orchestration between the API client and the state. No DOM in here;
// main.ts subscribes and paints. Each flow settles the optimistic
// overlay one way or the other before it returns.

import { api, ApiError } from './api.js';
import type { FlagCategory, GenerationView } from './api.js';
import {
  applyOptimisticFlag,
  bulkFlagTargets,
  currentItem,
  effectiveFlag,
  initialState,
  moveCursor,
  reconcileFlag,
  rollbackFlag,
  triageAction,
} from './state.js';
import type { AppState } from './state.js';

export class Store {
  state: AppState;
  private listener: (state: AppState) => void;

  constructor(listener: (state: AppState) => void = () => {}) {
    this.state = initialState();
    this.listener = listener;
  }

  set(next: AppState): void {
    this.state = next;
    this.listener(next);
  }

  patch(partial: Partial<AppState>): void {
    this.set({ ...this.state, ...partial });
  }
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    const detail = error.detail;
    if (detail && typeof detail === 'object' && 'gaps' in detail) {
      const gaps = (detail as { gaps: string[] }).gaps;
      return `missing assets: ${gaps.join('; ')}`;
    }
    return typeof detail === 'string' ? detail : error.message;
  }
  return error instanceof Error ? error.message : String(error);
}

export async function loadDatasets(store: Store): Promise<void> {
  const { datasets } = await api.listDatasets();
  store.patch({ datasets: datasets.map((d) => d.dataset_id) });
  const first = datasets[0];
  if (first) await selectDataset(store, first.dataset_id);
}

export async function selectDataset(store: Store, dataset: string): Promise<void> {
  const { classes } = await api.listClasses(dataset);
  store.patch({
    dataset,
    classes,
    classId: null,
    prompts: null,
    generations: [],
    cursor: 0,
    pending: {},
  });
}

export async function selectClass(store: Store, classId: string): Promise<void> {
  const dataset = store.state.dataset;
  if (!dataset) return;
  const [prompts, listing] = await Promise.all([
    api.getPrompts(dataset, classId).catch(() => null),
    api.getGenerations(dataset, classId).catch(() => null),
  ]);
  store.patch({
    classId,
    prompts,
    generations: listing?.generations ?? [],
    cursor: 0,
    pending: {},
    notice: listing ? null : 'no generations stored for this class yet',
  });
}

/**
 * Flag a generation, or clear its flag when the same category is
 * already showing (the buttons toggle). The card updates immediately;
 * the server's job state replaces the guess when the call returns.
 */
export async function toggleFlag(
  store: Store,
  gen: GenerationView,
  category: FlagCategory,
): Promise<void> {
  const dataset = store.state.dataset;
  if (!dataset) return;
  const clearing = effectiveFlag(store.state, gen) === category;
  store.set(
    applyOptimisticFlag(store.state, gen.generation_id, clearing ? null : category),
  );
  try {
    const result = clearing
      ? await api.clearFlag(`g:${gen.generation_id}`)
      : await api.flagGeneration(dataset, gen.generation_id, category);
    if (result.job) {
      store.set(reconcileFlag(store.state, gen.generation_id, result.job));
    } else {
      store.set(rollbackFlag(store.state, gen.generation_id));
    }
  } catch (error) {
    store.set({
      ...rollbackFlag(store.state, gen.generation_id),
      notice: describe(error),
    });
  }
}

export async function clearFlagById(store: Store, flagId: string): Promise<void> {
  try {
    const result = await api.clearFlag(flagId);
    if (flagId.startsWith('g:') && result.job) {
      store.set(reconcileFlag(store.state, flagId.slice(2), result.job));
    } else if (flagId.startsWith('p:')) {
      await refreshPrompts(store);
    }
  } catch (error) {
    store.patch({ notice: describe(error) });
  }
}

async function refreshPrompts(store: Store): Promise<void> {
  const { dataset, classId } = store.state;
  if (!dataset || !classId) return;
  const prompts = await api.getPrompts(dataset, classId).catch(() => null);
  store.patch({ prompts });
}

export async function flagPromptNo(
  store: Store,
  promptNo: number,
  category: FlagCategory,
): Promise<void> {
  const { dataset, classId } = store.state;
  if (!dataset || !classId) return;
  try {
    await api.flagPrompt(dataset, classId, promptNo, category);
    await refreshPrompts(store);
  } catch (error) {
    store.patch({ notice: describe(error) });
  }
}

export async function saveCorrection(
  store: Store,
  promptNo: number,
  text: string,
): Promise<void> {
  const { dataset, classId } = store.state;
  if (!dataset || !classId) return;
  try {
    await api.replacePrompt(dataset, classId, promptNo, text);
    await refreshPrompts(store);
    store.patch({ notice: `prompt ${promptNo} corrected` });
  } catch (error) {
    store.patch({ notice: describe(error) });
  }
}

export async function triggerRegenerate(store: Store, gen: GenerationView): Promise<void> {
  const dataset = store.state.dataset;
  if (!dataset) return;
  try {
    const result = await api.regenerate(dataset, gen.generation_id);
    store.patch({ notice: `queued replacement ${result.replacement_id}` });
    if (store.state.classId) await selectClass(store, store.state.classId);
  } catch (error) {
    store.patch({ notice: describe(error) });
  }
}

export async function bulkFlag(store: Store, category: FlagCategory): Promise<void> {
  const targets = bulkFlagTargets(store.state, category);
  for (const id of targets) {
    const gen = store.state.generations.find((g) => g.generation_id === id);
    if (gen) await toggleFlag(store, gen, category);
  }
}

/**
 * Run the evaluation twice, with calibration off and on, then read the
 * paired comparison back from the server. The panel shows those three
 * payloads untouched; nothing is recomputed here.
 */
export async function runBoth(store: Store): Promise<void> {
  const dataset = store.state.dataset;
  if (!dataset || store.state.runPanel.busy) return;
  const panel = store.state.runPanel;
  store.patch({ runPanel: { ...panel, busy: true }, notice: null });
  try {
    const base = {
      dataset_id: dataset,
      backend_id: panel.backend,
      n_g: panel.ng,
      n_scales: panel.scales,
    };
    const uncorrected = await api.startRun({ ...base, calibration_applied: false });
    const calibrated = await api.startRun({ ...base, calibration_applied: true });
    const paired = await api.getRun(uncorrected.run_id);
    store.patch({
      runPanel: {
        ...store.state.runPanel,
        busy: false,
        uncorrected: { run_id: uncorrected.run_id, report: uncorrected.report },
        calibrated: { run_id: calibrated.run_id, report: calibrated.report },
        delta: paired.calibration_delta,
      },
    });
  } catch (error) {
    store.patch({
      runPanel: { ...store.state.runPanel, busy: false },
      notice: describe(error),
    });
  }
}

/**
 * One keypress of the triage loop. Approve clears any flag on the
 * current item; the two flag keys set their category; all three move
 * on to the next card.
 */
export async function triage(store: Store, key: string): Promise<void> {
  const action = triageAction(key);
  if (!action) return;
  if (action === 'next' || action === 'prev') {
    store.set(moveCursor(store.state, action === 'next' ? 1 : -1));
    return;
  }
  const item = currentItem(store.state);
  if (!item) return;
  if (action === 'approve') {
    if (effectiveFlag(store.state, item)) {
      await toggleFlag(store, item, effectiveFlag(store.state, item) as FlagCategory);
    }
  } else {
    const category: FlagCategory =
      action === 'flag_wrong' ? 'wrong_category' : 'poor_composition';
    if (effectiveFlag(store.state, item) !== category) {
      await toggleFlag(store, item, category);
    }
  }
  store.set(moveCursor(store.state, 1));
}

/**
 * Entry point for the review page. Served by the classification
 * service under /ui/ next to the JSON API it talks to:
 *
 *   visproto serve --port 8008 --ui-dir frontend/dist
 *
 * Rendering is wholesale: every state change repaints #app from the
 * builders in view.ts. Corrections being typed into prompt textareas
 * survive the repaint via collectDrafts/restoreDrafts.
 */

import type { FlagCategory } from './api.js';
import {
  bulkFlag,
  clearFlagById,
  flagPromptNo,
  loadDatasets,
  runBoth,
  saveCorrection,
  selectClass,
  selectDataset,
  Store,
  toggleFlag,
  triage,
  triggerRegenerate,
} from './flows.js';
import { renderApp } from './view.js';

function collectDrafts(root: HTMLElement): Map<string, string> {
  const drafts = new Map<string, string>();
  root.querySelectorAll<HTMLTextAreaElement>('.prompt-replacement').forEach((area) => {
    if (area.value !== area.defaultValue) {
      drafts.set(area.dataset.no ?? '', area.value);
    }
  });
  return drafts;
}

function restoreDrafts(root: HTMLElement, drafts: Map<string, string>): void {
  drafts.forEach((value, no) => {
    const area = root.querySelector<HTMLTextAreaElement>(
      `.prompt-replacement[data-no="${no}"]`,
    );
    if (area) area.value = value;
  });
}

function isTyping(target: EventTarget | null): boolean {
  return (
    target instanceof HTMLInputElement ||
    target instanceof HTMLTextAreaElement ||
    target instanceof HTMLSelectElement
  );
}

function boot(): void {
  const root = document.getElementById('app');
  if (!root) throw new Error('missing #app container');

  const store = new Store((state) => {
    const drafts = collectDrafts(root);
    root.innerHTML = renderApp(state);
    restoreDrafts(root, drafts);
  });

  root.addEventListener('click', (event) => {
    const target = (event.target as HTMLElement).closest<HTMLElement>('[data-action]');
    if (!target) return;
    const action = target.dataset.action;
    const genId = target.dataset.gen;
    const gen = store.state.generations.find((g) => g.generation_id === genId);
    switch (action) {
      case 'flag':
        if (gen) void toggleFlag(store, gen, target.dataset.category as FlagCategory);
        break;
      case 'clear-flag':
        if (target.dataset.flagId) void clearFlagById(store, target.dataset.flagId);
        break;
      case 'regen':
        if (gen) void triggerRegenerate(store, gen);
        break;
      case 'bulk-flag':
        void bulkFlag(store, target.dataset.category as FlagCategory);
        break;
      case 'flag-prompt':
        void flagPromptNo(
          store,
          Number(target.dataset.no),
          target.dataset.category as FlagCategory,
        );
        break;
      case 'save-prompt': {
        const no = target.dataset.no ?? '';
        const area = root.querySelector<HTMLTextAreaElement>(
          `.prompt-replacement[data-no="${no}"]`,
        );
        if (area && area.value.trim()) {
          void saveCorrection(store, Number(no), area.value.trim());
        }
        break;
      }
      case 'run': {
        const read = (role: string) =>
          root.querySelector<HTMLInputElement>(`[data-role="${role}"]`)?.value ?? '';
        store.patch({
          runPanel: {
            ...store.state.runPanel,
            backend: read('backend') || 'mock',
            ng: Number(read('ng')) || 10,
            scales: Number(read('scales')) || 3,
          },
        });
        void runBoth(store);
        break;
      }
      default:
        break;
    }
  });

  root.addEventListener('change', (event) => {
    const target = event.target as HTMLElement;
    const role = target.dataset.role;
    if (role === 'dataset-select' && target instanceof HTMLSelectElement) {
      if (target.value) void selectDataset(store, target.value);
    } else if (role === 'class-select' && target instanceof HTMLSelectElement) {
      if (target.value) void selectClass(store, target.value);
    }
  });

  document.addEventListener('keydown', (event) => {
    if (isTyping(event.target)) return;
    if (event.metaKey || event.ctrlKey || event.altKey) return;
    if (event.key === ' ') event.preventDefault(); // keep the page from scrolling
    void triage(store, event.key);
  });

  loadDatasets(store).catch((error) => {
    store.patch({ notice: `cannot reach the service: ${error}` });
  });
}

if (typeof document !== 'undefined') {
  boot();
}

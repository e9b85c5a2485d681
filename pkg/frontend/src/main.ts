/**
 * DOM wiring for the review workbench. All behavior lives in the store;
 * this file only renders state and forwards events.
 */

import { ReviewClient } from './api.js';
import { KEY_BINDINGS } from './keyboard.js';
import { blendHeatmap } from './overlay.js';
import { WorkbenchStore } from './state.js';

const client = new ReviewClient('');
const store = new WorkbenchStore(client, (message) => window.confirm(message));

function el<T extends HTMLElement>(id: string): T {
    const node = document.getElementById(id);
    if (!node) throw new Error(`missing element #${id}`);
    return node as T;
}

const canvas = el<HTMLCanvasElement>('canvas');
const thresholdSlider = el<HTMLInputElement>('threshold');
const thresholdValue = el<HTMLSpanElement>('threshold-value');
const alphaSlider = el<HTMLInputElement>('alpha');
const overlayToggle = el<HTMLInputElement>('overlay-toggle');
const probabilityBars = el<HTMLDivElement>('probability-bars');
const editor = el<HTMLTextAreaElement>('editor');
const statusBadge = el<HTMLSpanElement>('status-badge');
const noticeBar = el<HTMLDivElement>('notice');
const saveButton = el<HTMLButtonElement>('save');
const finalizeButton = el<HTMLButtonElement>('finalize');
const retryButton = el<HTMLButtonElement>('retry');
const studyInput = el<HTMLInputElement>('study-id');
const openButton = el<HTMLButtonElement>('open');
const uploadInput = el<HTMLInputElement>('upload');

let baseImage: ImageData | null = null;
let rawHeat: ImageData | null = null;

async function loadImageData(url: string): Promise<ImageData | null> {
    return new Promise((resolve) => {
        const img = new Image();
        img.onload = () => {
            const scratch = document.createElement('canvas');
            scratch.width = img.width;
            scratch.height = img.height;
            const ctx = scratch.getContext('2d')!;
            ctx.drawImage(img, 0, 0);
            resolve(ctx.getImageData(0, 0, img.width, img.height));
        };
        img.onerror = () => resolve(null);
        img.src = url;
    });
}

async function refreshImages(): Promise<void> {
    const state = store.getState();
    if (!state.studyId || state.status !== 'ready') return;
    baseImage = await loadImageData(client.imageUrl(state.studyId));
    const selected = state.interpretation?.findings.find(
        (f) => f.disease === state.selectedDisease,
    );
    rawHeat = selected ? await loadImageData(selected.heatmap_raw_png) : null;
    drawCanvas();
}

function drawCanvas(): void {
    const state = store.getState();
    const ctx = canvas.getContext('2d');
    if (!ctx || !baseImage) return;
    canvas.width = baseImage.width;
    canvas.height = baseImage.height;
    if (state.overlayVisible && rawHeat && rawHeat.width === baseImage.width) {
        const blended = ctx.createImageData(baseImage.width, baseImage.height);
        blendHeatmap(baseImage.data, rawHeat.data, state.overlayAlpha, blended.data);
        ctx.putImageData(blended, 0, 0);
    } else {
        ctx.putImageData(baseImage, 0, 0);
    }
    const finding = state.interpretation?.findings.find(
        (f) => f.disease === state.selectedDisease,
    );
    if (state.overlayVisible && finding?.bbox) {
        ctx.strokeStyle = 'red';
        ctx.lineWidth = 2;
        ctx.strokeRect(
            finding.bbox.col_min,
            finding.bbox.row_min,
            finding.bbox.col_max - finding.bbox.col_min + 1,
            finding.bbox.row_max - finding.bbox.row_min + 1,
        );
    }
}

function render(): void {
    const state = store.getState();
    thresholdSlider.value = String(state.threshold);
    thresholdValue.textContent = state.threshold.toFixed(2);
    overlayToggle.checked = state.overlayVisible;
    alphaSlider.value = String(state.overlayAlpha);
    statusBadge.textContent =
        state.status === 'ready' ? state.session?.status ?? '' : state.status;
    statusBadge.className = `badge badge-${state.session?.status ?? state.status}`;
    noticeBar.textContent = state.conflict ?? state.notice ?? '';
    retryButton.hidden = state.status !== 'offline';

    if (document.activeElement !== editor) editor.value = state.editorText;
    editor.readOnly = store.editorLocked;
    saveButton.disabled = store.editorLocked || !state.editorDirty;
    finalizeButton.disabled = store.editorLocked;

    probabilityBars.innerHTML = '';
    const interp = state.interpretation;
    if (interp) {
        for (const [disease, probability] of Object.entries(interp.probabilities)) {
            const row = document.createElement('div');
            row.className = 'bar-row';
            const annotated = interp.present.includes(disease);
            row.innerHTML =
                `<span class="bar-label${annotated ? ' annotated' : ''}">${disease}</span>` +
                `<span class="bar"><span class="bar-fill" style="width:${(probability * 100).toFixed(1)}%"></span></span>` +
                `<span class="bar-value">${probability.toFixed(2)}</span>`;
            row.onclick = () => {
                if (annotated) store.selectDisease(disease);
            };
            if (disease === state.selectedDisease) row.classList.add('selected');
            probabilityBars.appendChild(row);
        }
    }
    drawCanvas();
}

store.subscribe(render);
store.subscribe((state) => {
    if (state.status === 'ready') void refreshImages();
});

openButton.onclick = () => void store.loadStudy(studyInput.value.trim());
retryButton.onclick = () => void store.retry();
thresholdSlider.oninput = () => void store.setThreshold(Number(thresholdSlider.value));
alphaSlider.oninput = () => store.setOverlayAlpha(Number(alphaSlider.value));
overlayToggle.onchange = () => store.toggleOverlay();
editor.oninput = () => store.editDraft(editor.value);
saveButton.onclick = () => void store.saveDraft();
finalizeButton.onclick = () => void store.finalizeReport();
uploadInput.onchange = async () => {
    const file = uploadInput.files?.[0];
    if (!file) return;
    const studyId = await client.uploadStudy(file, file.name);
    studyInput.value = studyId;
    await store.loadStudy(studyId);
};

document.addEventListener('keydown', (event) => {
    if (document.activeElement === editor || document.activeElement === studyInput) return;
    const action = KEY_BINDINGS[event.key];
    if (!action) return;
    event.preventDefault();
    const state = store.getState();
    const step = (delta: number) =>
        void store.setThreshold(Math.min(0.99, Math.max(0.01, state.threshold + delta)));
    const cycle = (delta: number) => {
        const present = state.interpretation?.present ?? [];
        if (!present.length) return;
        const index = present.indexOf(state.selectedDisease ?? '');
        store.selectDisease(present[(index + delta + present.length) % present.length]);
    };
    switch (action) {
        case 'overlay-toggle': store.toggleOverlay(); break;
        case 'alpha-up': store.setOverlayAlpha(state.overlayAlpha + 0.1); break;
        case 'alpha-down': store.setOverlayAlpha(state.overlayAlpha - 0.1); break;
        case 'threshold-up': step(0.05); break;
        case 'threshold-down': step(-0.05); break;
        case 'disease-next': cycle(1); break;
        case 'disease-prev': cycle(-1); break;
        case 'focus-editor': editor.focus(); break;
        case 'save-draft': void store.saveDraft(); break;
        case 'finalize': void store.finalizeReport(); break;
        case 'retry': void store.retry(); break;
    }
});

render();

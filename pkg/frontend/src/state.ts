/**
 * Workbench state machine.
 *
 * The service is the single source of truth: every threshold change
 * re-queries GET /studies/{id}/interpretation and the store never derives
 * the disease list from probabilities locally. Manual edits survive
 * offline errors and are only discarded behind the confirmation guard.
 */

import { ApiError, Interpretation, ReviewClient, Session } from './api.js';

export type ViewStatus = 'idle' | 'loading' | 'ready' | 'not-found' | 'offline';

export interface WorkbenchState {
    studyId: string | null;
    status: ViewStatus;
    threshold: number;
    overlayVisible: boolean;
    overlayAlpha: number;
    selectedDisease: string | null;
    interpretation: Interpretation | null;
    session: Session | null;
    editorText: string;
    editorDirty: boolean;
    conflict: string | null;
    notice: string | null;
}

export type ConfirmGuard = (message: string) => boolean;
export type Listener = (state: WorkbenchState) => void;

const DEFAULT_THRESHOLD = 0.8;

export class WorkbenchStore {
    private state: WorkbenchState = {
        studyId: null,
        status: 'idle',
        threshold: DEFAULT_THRESHOLD,
        overlayVisible: true,
        overlayAlpha: 0.4,
        selectedDisease: null,
        interpretation: null,
        session: null,
        editorText: '',
        editorDirty: false,
        conflict: null,
        notice: null,
    };
    private listeners: Listener[] = [];

    constructor(
        private readonly client: ReviewClient,
        private readonly confirmGuard: ConfirmGuard = () => true,
    ) {}

    getState(): WorkbenchState {
        return this.state;
    }

    subscribe(listener: Listener): () => void {
        this.listeners.push(listener);
        return () => {
            this.listeners = this.listeners.filter((l) => l !== listener);
        };
    }

    private update(patch: Partial<WorkbenchState>): void {
        this.state = { ...this.state, ...patch };
        for (const listener of this.listeners) listener(this.state);
    }

    get editorLocked(): boolean {
        return this.state.session?.status === 'finalized';
    }

    async loadStudy(studyId: string): Promise<void> {
        this.update({ studyId, status: 'loading', conflict: null, notice: null });
        try {
            const interpretation = await this.client.interpretation(studyId, this.state.threshold);
            const session = await this.client.session(studyId);
            this.update({
                status: 'ready',
                interpretation,
                session,
                selectedDisease: interpretation.present[0] ?? null,
                editorText: session.draft_report,
                editorDirty: false,
            });
        } catch (error) {
            if (error instanceof ApiError && error.status === 404) {
                this.update({ status: 'not-found', interpretation: null, session: null });
            } else {
                // keep editorText: unsaved work must survive an outage
                this.update({ status: 'offline', notice: 'service unreachable; retry when back' });
            }
        }
    }

    async retry(): Promise<void> {
        if (this.state.studyId) await this.loadStudy(this.state.studyId);
    }

    /**
     * Slider change: re-fetch from the service at the new threshold. The
     * refreshed report proposal replaces the editor buffer, so unsaved
     * manual edits require confirmation first.
     */
    async setThreshold(threshold: number): Promise<void> {
        if (!this.state.studyId || this.state.interpretation === null) {
            this.update({ threshold });
            return;
        }
        if (this.state.editorDirty && !this.confirmGuard('Discard unsaved report edits?')) {
            return;
        }
        this.update({ threshold, status: 'loading' });
        try {
            const interpretation = await this.client.interpretation(this.state.studyId, threshold);
            const selected = interpretation.present.includes(this.state.selectedDisease ?? '')
                ? this.state.selectedDisease
                : interpretation.present[0] ?? null;
            this.update({
                status: 'ready',
                interpretation,
                selectedDisease: selected,
                editorText: interpretation.report.text,
                editorDirty: interpretation.report.text !== (this.state.session?.draft_report ?? ''),
            });
        } catch (error) {
            this.update({ status: 'offline', notice: 'service unreachable; retry when back' });
        }
    }

    toggleOverlay(): void {
        this.update({ overlayVisible: !this.state.overlayVisible });
    }

    setOverlayAlpha(alpha: number): void {
        this.update({ overlayAlpha: Math.min(1, Math.max(0, alpha)) });
    }

    selectDisease(disease: string | null): void {
        this.update({ selectedDisease: disease });
    }

    editDraft(text: string): void {
        if (this.editorLocked) return;
        this.update({
            editorText: text,
            editorDirty: text !== (this.state.session?.draft_report ?? ''),
            conflict: null,
        });
    }

    async saveDraft(): Promise<void> {
        const { studyId, session, editorText } = this.state;
        if (!studyId || !session || this.editorLocked) return;
        try {
            const updated = await this.client.saveDraft(studyId, editorText, session.audit_length);
            this.update({ session: updated, editorDirty: false, conflict: null });
        } catch (error) {
            if (error instanceof ApiError && error.status === 409) {
                const fresh = await this.client.session(studyId);
                this.update({ session: fresh, notice: 'session already finalized' });
            } else if (error instanceof ApiError && error.status === 412) {
                const fresh = await this.client.session(studyId);
                this.update({
                    session: fresh,
                    conflict: 'the report changed in another tab; review before saving again',
                });
            } else {
                this.update({ status: 'offline', notice: 'service unreachable; retry when back' });
            }
        }
    }

    /** Save any pending edit, then finalize; tolerant of a concurrent 409. */
    async finalizeReport(): Promise<void> {
        const { studyId } = this.state;
        if (!studyId || !this.state.session) return;
        if (this.state.editorDirty) {
            await this.saveDraft();
            if (this.state.editorDirty || this.state.conflict) return; // save failed; do not finalize
        }
        try {
            const session = await this.client.finalize(studyId);
            this.update({ session, notice: 'report finalized' });
        } catch (error) {
            if (error instanceof ApiError && error.status === 409) {
                const fresh = await this.client.session(studyId);
                this.update({ session: fresh, notice: 'report finalized' });
            } else {
                this.update({ status: 'offline', notice: 'service unreachable; retry when back' });
            }
        }
    }
}

/**
 * Typed client for the review service JSON API.
 *
 * The workbench talks to the service exclusively through this module;
 * nothing here computes annotations or thresholds locally.
 */

export interface BBox {
    row_min: number;
    col_min: number;
    row_max: number;
    col_max: number;
}

export interface Finding {
    disease: string;
    probability: number;
    bbox: BBox | null;
    sentences: string[][];
    used_shared_decoder: boolean;
    warnings: string[];
    heatmap_png: string;
    heatmap_raw_png: string;
    crop_png: string;
}

export interface ReportSentence {
    tokens: string[];
    source: 'normality' | 'abnormality';
    disease: string | null;
}

export interface Interpretation {
    study_id: string;
    threshold: number;
    probabilities: Record<string, number>;
    present: string[];
    is_normal: boolean;
    findings: Finding[];
    report: { sentences: ReportSentence[]; text: string };
    provenance: Record<string, unknown>;
}

export interface Edit {
    edited_at: string;
    text: string;
}

export interface Session {
    study_id: string;
    draft_report: string;
    status: 'draft' | 'finalized';
    created_at: string;
    updated_at: string;
    audit: Edit[];
    audit_length: number;
}

export class ApiError extends Error {
    constructor(public readonly status: number, public readonly detail: string) {
        super(`HTTP ${status}: ${detail}`);
    }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

async function raise(response: Response): Promise<never> {
    let detail = response.statusText;
    try {
        const body = await response.json();
        if (body && typeof body.detail === 'string') detail = body.detail;
    } catch {
        /* non-JSON error body */
    }
    throw new ApiError(response.status, detail);
}

export class ReviewClient {
    constructor(
        private readonly baseUrl: string = '',
        private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
    ) {}

    imageUrl(studyId: string): string {
        return `${this.baseUrl}/studies/${studyId}/image.png`;
    }

    async uploadStudy(file: Blob, filename = 'study.png'): Promise<string> {
        const form = new FormData();
        form.append('image', file, filename);
        const response = await this.fetchFn(`${this.baseUrl}/studies`, {
            method: 'POST',
            body: form,
        });
        if (!response.ok) await raise(response);
        const body = await response.json();
        return body.study_id as string;
    }

    async interpretation(studyId: string, threshold?: number): Promise<Interpretation> {
        const query = threshold === undefined ? '' : `?threshold=${threshold}`;
        const response = await this.fetchFn(
            `${this.baseUrl}/studies/${studyId}/interpretation${query}`,
        );
        if (!response.ok) await raise(response);
        return (await response.json()) as Interpretation;
    }

    async session(studyId: string): Promise<Session> {
        const response = await this.fetchFn(`${this.baseUrl}/studies/${studyId}/session`);
        if (!response.ok) await raise(response);
        return (await response.json()) as Session;
    }

    async saveDraft(studyId: string, text: string, auditLength?: number): Promise<Session> {
        const headers: Record<string, string> = { 'Content-Type': 'application/json' };
        if (auditLength !== undefined) headers['If-Match-Audit-Length'] = String(auditLength);
        const response = await this.fetchFn(`${this.baseUrl}/studies/${studyId}/report`, {
            method: 'PUT',
            headers,
            body: JSON.stringify({ text }),
        });
        if (!response.ok) await raise(response);
        return (await response.json()) as Session;
    }

    async finalize(studyId: string): Promise<Session> {
        const response = await this.fetchFn(`${this.baseUrl}/studies/${studyId}/finalize`, {
            method: 'POST',
        });
        if (!response.ok) await raise(response);
        return (await response.json()) as Session;
    }
}

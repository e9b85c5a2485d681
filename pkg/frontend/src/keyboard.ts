/**
 * Keyboard bindings: every workbench state transition is reachable
 * without a pointer. The map is data so tests can assert coverage.
 */

export type WorkbenchAction =
    | 'overlay-toggle'
    | 'alpha-up'
    | 'alpha-down'
    | 'threshold-up'
    | 'threshold-down'
    | 'disease-next'
    | 'disease-prev'
    | 'focus-editor'
    | 'save-draft'
    | 'finalize'
    | 'retry';

export const KEY_BINDINGS: Record<string, WorkbenchAction> = {
    o: 'overlay-toggle',
    ']': 'alpha-up',
    '[': 'alpha-down',
    ArrowUp: 'threshold-up',
    ArrowDown: 'threshold-down',
    ArrowRight: 'disease-next',
    ArrowLeft: 'disease-prev',
    e: 'focus-editor',
    s: 'save-draft',
    f: 'finalize',
    r: 'retry',
};

export const ALL_ACTIONS: WorkbenchAction[] = [
    'overlay-toggle',
    'alpha-up',
    'alpha-down',
    'threshold-up',
    'threshold-down',
    'disease-next',
    'disease-prev',
    'focus-editor',
    'save-draft',
    'finalize',
    'retry',
];
